"""Command-line front end: simulate, recon, train, eval.

Exit codes: 0 success, 2 configuration error, 3 I/O failure, 4 missing
artifact, 5 numeric failure.  Every subcommand writes its output directory
atomically (a temporary sibling renamed on success), so a failed run never
leaves partial results.  All randomness comes from explicit ``--seed``
flags; reruns with identical flags produce byte-identical artifacts.

The only environment variable consulted is ``TRANSEM_NUM_THREADS``; the
numeric kernels are sequential by contract (bitwise reproducibility), so it
is validated and recorded but does not change results.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import formats, metrics, recon, simulation, unrolled
from .system import ScannerGeometry2D, geometry_from_dict, load_geometry

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_NUMERIC = 5

METHOD_ORDER = ["mlem", "osem", "mapem", "fbsem-cnn", "transem"]


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@contextmanager
def _atomic_dir(final_path):
    final = Path(final_path)
    if final.exists():
        raise CliError(EXIT_CONFIG, f"output directory {final} already exists")
    tmp = final.parent / (final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.rename(tmp, final)


def _check_threads_env():
    value = os.environ.get("TRANSEM_NUM_THREADS")
    if value is None:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"TRANSEM_NUM_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise CliError(EXIT_CONFIG, "TRANSEM_NUM_THREADS must be >= 1")
    return threads


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(path):
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise CliError(EXIT_MISSING, f"no dataset manifest under {root}")
    return simulation.Dataset.load(root)


def _geometry_from_args(args):
    if args.geometry is not None:
        geometry_path = Path(args.geometry)
        if not geometry_path.is_file():
            raise CliError(EXIT_MISSING, f"geometry file {geometry_path} not found")
        geometry, _ = load_geometry(geometry_path)
        return geometry
    return ScannerGeometry2D(
        n_angles=args.angles,
        n_bins=args.bins,
        bin_spacing_mm=args.bin_mm,
        image_size=args.image_size,
        pixel_size_mm=args.pixel_mm,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args):
    geometry = _geometry_from_args(args)
    split = tuple(float(part) for part in args.split.split(","))
    settings = simulation.SimulationSettings(
        low_counts=args.counts,
        high_counts=args.high_counts,
        desk_factor=args.desk_factor,
        background_fraction=args.background_fraction,
        psf_high_mm=args.psf_high,
        psf_low_mm=args.psf_low,
    )
    with _atomic_dir(args.out) as tmp:
        simulation.generate_dataset(
            tmp, args.phantoms, split, geometry, args.seed, settings
        )
    return EXIT_OK


def _classic_method(method, args, dataset, model):
    config = recon.ReconConfig(
        n_iterations=args.iters,
        n_subsets=1 if method == "mlem" else args.subsets,
        beta=args.beta,
        epsilon_em=args.epsilon,
    )

    def run(sample):
        if method == "mapem":
            return recon.mapem_reconstruct(sample.y_low, sample.background, model, config)
        return recon.osem_reconstruct(sample.y_low, sample.background, model, config)

    return run


def _learned_method(method, args, dataset, model):
    if args.checkpoint is None:
        raise CliError(EXIT_CONFIG, f"method {method} requires --checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(EXIT_MISSING, f"checkpoint {ckpt} not found")
    tmodel = unrolled.load_checkpoint(ckpt)
    expected = "rstr" if method == "transem" else "cnn"
    if tmodel.config.regularizer != expected:
        raise CliError(
            EXIT_CONFIG,
            f"checkpoint holds a {tmodel.config.regularizer!r} regularizer, "
            f"but method {method} expects {expected!r}",
        )

    def run(sample):
        return unrolled.reconstruct(sample.y_low, sample.background, model, tmodel)

    return run


def _cmd_recon(args):
    dataset = _load_dataset(args.dataset)
    model = dataset.low_count_model()
    samples = sorted(dataset.split_samples(args.split), key=lambda s: s.sample_id)
    if not samples:
        raise CliError(EXIT_CONFIG, f"dataset split {args.split!r} is empty")

    if args.method in ("mlem", "osem", "mapem"):
        run = _classic_method(args.method, args, dataset, model)
    else:
        run = _learned_method(args.method, args, dataset, model)

    report = metrics.MetricsReport(
        method=args.method, count_level=dataset.manifest["count_level"]
    )
    recons, truths, masks = [], [], []
    with _atomic_dir(args.out) as tmp:
        for sample in samples:
            image = run(sample)
            formats.write_img1(tmp / f"{sample.sample_id}_recon.img1", image)
            formats.write_pgm(tmp / f"{sample.sample_id}_recon.pgm", image)
            label_n = metrics.normalize_max1(sample.label)
            image_n = metrics.normalize_max1(image)
            report.samples.append(
                metrics.SampleScores(
                    sample_id=sample.sample_id,
                    psnr=metrics.psnr(label_n, image_n),
                    ssim=metrics.ssim(label_n, image_n),
                )
            )
            recons.append(image_n)
            truths.append(metrics.normalize_max1(sample.phantom))
            masks.append(sample.lesion_mask)
        report.mcrc = metrics.mcrc(recons, truths, masks)

        header = "method,count_level,sample_id,psnr,ssim,mcrc"
        with open(tmp / "metrics.csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join([header] + report.csv_rows()) + "\n")
        _write_json(tmp / "report.json", report.to_dict())
        _write_json(
            tmp / "run.json",
            {
                "method": args.method,
                "split": args.split,
                "count_level": dataset.manifest["count_level"],
                "n_samples": len(samples),
                "iters": args.iters,
                "subsets": args.subsets,
                "beta": args.beta,
            },
        )
    return EXIT_OK


def _cmd_train(args):
    dataset = _load_dataset(args.dataset)
    if args.blocks is not None:
        if args.blocks % args.subsets != 0:
            raise CliError(
                EXIT_CONFIG,
                f"--blocks {args.blocks} is not a multiple of --subsets {args.subsets}",
            )
        iterations = args.blocks // args.subsets
    else:
        iterations = args.iters
    config = unrolled.TransEMConfig(
        n_iterations=iterations,
        n_subsets=args.subsets,
        share_weights=not args.no_share_weights,
        regularizer=args.regularizer,
        embed_dim=args.embed_dim,
        n_heads=args.heads,
        window_size=args.window,
        mlp_ratio=args.mlp_ratio,
        outer_residual=not args.no_outer_residual,
        shift_windows=args.shift_windows,
        alpha_init=args.alpha_init,
    )
    tmodel = unrolled.TransEMModel.create(config, seed=args.seed)
    model = dataset.low_count_model()
    with _atomic_dir(args.out) as tmp:
        result = unrolled.train(
            tmodel,
            dataset,
            model,
            epochs=args.epochs,
            max_steps=args.max_steps,
            lr=args.lr,
            batch_size=args.batch,
            seed=args.seed,
            val_every=args.val_every,
            dump_dir=tmp,
        )
        unrolled.save_checkpoint(tmp / "checkpoint.tem1", tmodel)
        unrolled.write_training_log(tmp / "train_log.csv", result.log_rows)
        _write_json(
            tmp / "train.json",
            {
                "best_val_psnr": result.best_val_psnr,
                "best_step": result.best_step,
                "n_steps": len(result.loss_curve),
                "final_loss": result.loss_curve[-1][1] if result.loss_curve else None,
                "regularizer": config.regularizer,
                "n_blocks": config.n_blocks,
                "outer_residual": config.outer_residual,
                "lr": args.lr,
                "batch": args.batch,
                "seed": args.seed,
            },
        )
    return EXIT_OK


def _cmd_eval(args):
    reports = []
    for input_dir in args.inputs:
        report_path = Path(input_dir) / "report.json"
        if not report_path.is_file():
            raise CliError(EXIT_CONFIG, f"no report.json under {input_dir}")
        with open(report_path, "r", encoding="utf-8") as fh:
            reports.append(json.load(fh))

    def order_key(doc):
        method = doc["method"]
        rank = METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)
        return (float(doc["count_level"]), rank, method)

    reports.sort(key=order_key)
    with _atomic_dir(args.out) as tmp:
        lines = ["method,count_level,psnr,ssim,mcrc"]
        for doc in reports:
            lines.append(
                f"{doc['method']},{doc['count_level']!r},{doc['psnr_text']},"
                f"{doc['ssim_text']},{doc['mcrc']:.4f}"
            )
        with open(tmp / "table.csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        _write_json(tmp / "table.json", {"methods": reports})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_geometry_flags(parser):
    parser.add_argument("--geometry", default=None, help="geometry JSON file")
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--pixel-mm", type=float, default=2.0)
    parser.add_argument("--angles", type=int, default=60)
    parser.add_argument("--bins", type=int, default=95)
    parser.add_argument("--bin-mm", type=float, default=2.0)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="transem",
        description="Simulate, reconstruct, train and evaluate desk-scale "
        "tomographic experiments.",
    )
    parser.add_argument(
        "--config",
        default=None,
        help="JSON file of default flag values (command line overrides)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--out", required=True)
    sim.add_argument("--phantoms", type=int, default=20)
    sim.add_argument("--split", default="17,2,1", help="train,val,test counts or ratios")
    sim.add_argument("--counts", type=float, default=simulation.DEFAULT_LOW_COUNTS)
    sim.add_argument("--high-counts", type=float, default=simulation.DEFAULT_HIGH_COUNTS)
    sim.add_argument("--desk-factor", type=float, default=simulation.DEFAULT_DESK_FACTOR)
    sim.add_argument(
        "--background-fraction", type=float, default=simulation.DEFAULT_BACKGROUND_FRACTION
    )
    sim.add_argument("--psf-high", type=float, default=simulation.DEFAULT_PSF_HIGH_MM)
    sim.add_argument("--psf-low", type=float, default=simulation.DEFAULT_PSF_LOW_MM)
    sim.add_argument("--seed", type=int, default=0)
    _add_geometry_flags(sim)
    sim.set_defaults(func=_cmd_simulate)

    rec = commands.add_parser("recon", help="reconstruct a dataset split")
    rec.add_argument("--dataset", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--method", required=True, choices=METHOD_ORDER)
    rec.add_argument("--split", default="test")
    rec.add_argument("--iters", type=int, default=10)
    rec.add_argument("--subsets", type=int, default=6)
    rec.add_argument("--beta", type=float, default=0.005)
    rec.add_argument("--epsilon", type=float, default=recon.DEFAULT_EPSILON)
    rec.add_argument("--checkpoint", default=None)
    rec.set_defaults(func=_cmd_recon)

    tra = commands.add_parser("train", help="train an unrolled model")
    tra.add_argument("--dataset", required=True)
    tra.add_argument("--out", required=True)
    tra.add_argument("--blocks", type=int, default=None, help="total unrolled blocks")
    tra.add_argument("--iters", type=int, default=10)
    tra.add_argument("--subsets", type=int, default=6)
    tra.add_argument("--epochs", type=int, default=100)
    tra.add_argument("--max-steps", type=int, default=None)
    tra.add_argument("--lr", type=float, default=5e-5)
    tra.add_argument("--batch", type=int, default=4)
    tra.add_argument("--seed", type=int, default=0)
    tra.add_argument("--val-every", type=int, default=1)
    tra.add_argument("--regularizer", choices=["rstr", "cnn"], default="rstr")
    tra.add_argument("--no-outer-residual", action="store_true")
    tra.add_argument("--no-share-weights", action="store_true")
    tra.add_argument("--shift-windows", action="store_true")
    tra.add_argument("--embed-dim", type=int, default=32)
    tra.add_argument("--heads", type=int, default=4)
    tra.add_argument("--window", type=int, default=4)
    tra.add_argument("--mlp-ratio", type=int, default=2)
    tra.add_argument("--alpha-init", type=float, default=1.0)
    tra.set_defaults(func=_cmd_train)

    eva = commands.add_parser("eval", help="aggregate recon reports into one table")
    eva.add_argument("--out", required=True)
    eva.add_argument("--inputs", nargs="+", required=True)
    eva.set_defaults(func=_cmd_eval)

    return parser


def _apply_config_file(parser, argv):
    """Use --config JSON values as parser defaults, then reparse."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config is None:
        return argv
    config_path = Path(known.config)
    if not config_path.is_file():
        raise CliError(EXIT_MISSING, f"config file {config_path} not found")
    with open(config_path, "r", encoding="utf-8") as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise CliError(EXIT_CONFIG, "config file must hold a JSON object")
    renamed = {key.replace("-", "_"): value for key, value in values.items()}
    for action_group in parser._subparsers._group_actions:
        for sub in action_group.choices.values():
            known_flags = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in renamed.items() if k in known_flags})
    return argv


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        _check_threads_env()
        argv = _apply_config_file(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            # argparse exits 0 for --help and 2 for usage errors
            return int(exc.code or 0)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except unrolled.TrainingDiverged as exc:
        where = f" (state dumped to {exc.dump_path})" if exc.dump_path else ""
        print(f"numeric failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
