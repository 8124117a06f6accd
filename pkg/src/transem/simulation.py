"""Synthetic phantoms, Poisson scan simulation and dataset assembly.

Phantoms are stacks of ellipses painted in order (later shapes overwrite
earlier ones) plus hot disks whose activity doubles the tissue underneath.
Scans scale the phantom to a target number of expected true counts, add a
uniform known background and draw Poisson counts.

Every random draw flows from one master seed through counter-based
(Philox) generators keyed by sample id, so datasets regenerate bitwise and
samples are independent of generation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .recon import ReconConfig, osem_reconstruct
from .system import SystemModel, geometry_to_dict

__all__ = [
    "Ellipse",
    "HotDisk",
    "PhantomSpec",
    "ScanResult",
    "Sample",
    "Dataset",
    "SimulationSettings",
    "rng_for",
    "render_phantom",
    "random_phantom_spec",
    "simulate_scan",
    "make_label",
    "generate_dataset",
    "geometry_hash",
]

DEFAULT_HIGH_COUNTS = 5e6
DEFAULT_LOW_COUNTS = 5e5
DEFAULT_DESK_FACTOR = 0.1
DEFAULT_BACKGROUND_FRACTION = 0.2
DEFAULT_PSF_HIGH_MM = 2.5
DEFAULT_PSF_LOW_MM = 4.0


@dataclass(frozen=True)
class Ellipse:
    center_x_mm: float
    center_y_mm: float
    semi_axis_a_mm: float
    semi_axis_b_mm: float
    rotation_rad: float
    activity: float


@dataclass(frozen=True)
class HotDisk:
    center_x_mm: float
    center_y_mm: float
    radius_mm: float
    activity: float


@dataclass
class PhantomSpec:
    """Painter's-order shape list; disks are painted after all ellipses."""

    ellipses: list = field(default_factory=list)
    hot_disks: list = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        for shape in list(self.ellipses) + list(self.hot_disks):
            if shape.activity < 0:
                raise ValueError("activities must be nonnegative")


def rng_for(master_seed, *stream):
    """Counter-based generator for one named stream of a master seed."""
    seq = np.random.SeedSequence([int(master_seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(seq))


def render_phantom(spec, geometry):
    """Rasterize a phantom by pixel-center inclusion.

    Returns ``(image, lesion_mask)``; the mask marks exactly the hot-disk
    pixels (painted last, after every ellipse).
    """
    x, y = geometry.pixel_centers()
    image = np.zeros((geometry.image_size, geometry.image_size))
    for e in spec.ellipses:
        dx, dy = x - e.center_x_mm, y - e.center_y_mm
        cos_r, sin_r = np.cos(e.rotation_rad), np.sin(e.rotation_rad)
        u = (dx * cos_r + dy * sin_r) / e.semi_axis_a_mm
        v = (-dx * sin_r + dy * cos_r) / e.semi_axis_b_mm
        image[u * u + v * v <= 1.0] = e.activity
    lesion_mask = np.zeros_like(image, dtype=bool)
    for d in spec.hot_disks:
        inside = (x - d.center_x_mm) ** 2 + (y - d.center_y_mm) ** 2 <= d.radius_mm**2
        image[inside] = d.activity
        lesion_mask |= inside
    return image, lesion_mask


def random_phantom_spec(geometry, rng):
    """Brain-like phantom: nested ellipses plus 3..6 hot disks.

    Disk radii are uniform in [2, 8] mm and each disk's activity is twice
    the tissue value underneath its center, keeping contrast recovery
    well defined.
    """
    half = geometry.half_extent_mm
    outline_a = half * rng.uniform(0.80, 0.92)
    outline_b = half * rng.uniform(0.68, 0.85)
    tilt = rng.uniform(0.0, np.pi)
    ellipses = [
        Ellipse(0.0, 0.0, outline_a, outline_b, tilt, rng.uniform(0.9, 1.1)),
        Ellipse(
            rng.uniform(-0.05, 0.05) * half,
            rng.uniform(-0.05, 0.05) * half,
            outline_a * rng.uniform(0.60, 0.75),
            outline_b * rng.uniform(0.60, 0.75),
            tilt + rng.uniform(-0.2, 0.2),
            rng.uniform(0.45, 0.60),
        ),
    ]
    if rng.uniform() < 0.7:
        ellipses.append(
            Ellipse(
                rng.uniform(-0.10, 0.10) * half,
                rng.uniform(-0.10, 0.10) * half,
                outline_a * rng.uniform(0.12, 0.22),
                outline_b * rng.uniform(0.12, 0.22),
                tilt,
                rng.uniform(0.05, 0.15),
            )
        )
    if rng.uniform() < 0.5:
        ellipses.append(
            Ellipse(
                rng.uniform(-0.35, 0.35) * half,
                rng.uniform(-0.35, 0.35) * half,
                outline_a * rng.uniform(0.10, 0.18),
                outline_b * rng.uniform(0.10, 0.18),
                rng.uniform(0.0, np.pi),
                rng.uniform(0.7, 0.9),
            )
        )

    tissue_only = PhantomSpec(ellipses=list(ellipses))
    tissue_image, _ = render_phantom(tissue_only, geometry)
    x_grid, y_grid = geometry.pixel_centers()

    disks = []
    n_disks = int(rng.integers(3, 7))
    attempts = 0
    while len(disks) < n_disks and attempts < 200:
        attempts += 1
        radius = rng.uniform(2.0, 8.0)
        cx = rng.uniform(-0.55, 0.55) * half
        cy = rng.uniform(-0.55, 0.55) * half
        col = int(np.argmin(np.abs(x_grid[0, :] - cx)))
        row = int(np.argmin(np.abs(y_grid[:, 0] - cy)))
        tissue = tissue_image[row, col]
        if tissue <= 0:
            continue
        disks.append(HotDisk(cx, cy, radius, 2.0 * tissue))
    return PhantomSpec(ellipses=ellipses, hot_disks=disks)


@dataclass
class ScanResult:
    counts: np.ndarray  # Poisson draw, integer-valued floats
    background: np.ndarray  # b, known expectation
    expected: np.ndarray  # ybar = A x_scaled + b (for testing)
    scale: float  # factor applied to the phantom


def simulate_scan(phantom, model, total_true_counts, background_fraction, seed_or_rng):
    """Scale the phantom, add a uniform background and draw Poisson counts.

    The phantom is scaled so the expected true counts sum to
    ``total_true_counts``; the background expectation is uniform with total
    ``background_fraction / (1 - background_fraction)`` times the trues.
    """
    if total_true_counts <= 0:
        raise ValueError("total_true_counts must be positive")
    if not (0.0 <= background_fraction < 1.0):
        raise ValueError("background_fraction must lie in [0, 1)")
    phantom = np.asarray(phantom, dtype=np.float64)
    projection = model.forward_project(phantom)
    total = projection.sum()
    if total <= 0:
        raise ValueError("phantom projects to zero counts")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else rng_for(seed_or_rng, 0)
    )
    scale = total_true_counts / total
    expected_trues = projection * scale
    background_total = background_fraction / (1.0 - background_fraction) * total_true_counts
    background = np.full_like(expected_trues, background_total / expected_trues.size)
    expected = expected_trues + background
    counts = rng.poisson(expected).astype(np.float64)
    return ScanResult(counts=counts, background=background, expected=expected, scale=scale)


def make_label(y_high, b_high, model, n_iterations=10, n_subsets=6):
    """Reference image: OSEM reconstruction of the high-count scan."""
    config = ReconConfig(n_iterations=n_iterations, n_subsets=n_subsets, beta=0.0)
    return osem_reconstruct(y_high, b_high, model, config)


def geometry_hash(geometry, psf_fwhm_mm=0.0):
    import hashlib

    doc = json.dumps(geometry_to_dict(geometry, psf_fwhm_mm), sort_keys=True)
    return hashlib.sha256(doc.encode("ascii")).hexdigest()


@dataclass
class SimulationSettings:
    """Knobs of the scan protocol; defaults give the desk-scale regime."""

    low_counts: float = DEFAULT_LOW_COUNTS
    high_counts: float = DEFAULT_HIGH_COUNTS
    desk_factor: float = DEFAULT_DESK_FACTOR
    background_fraction: float = DEFAULT_BACKGROUND_FRACTION
    psf_high_mm: float = DEFAULT_PSF_HIGH_MM
    psf_low_mm: float = DEFAULT_PSF_LOW_MM

    @property
    def scaled_low(self):
        return self.low_counts * self.desk_factor

    @property
    def scaled_high(self):
        return self.high_counts * self.desk_factor


def _resolve_split(split, n_phantoms):
    split = tuple(float(s) for s in split)
    if len(split) != 3:
        raise ValueError("split must have three entries (train, val, test)")
    if all(float(s).is_integer() for s in split) and sum(split) == n_phantoms:
        counts = tuple(int(s) for s in split)
    elif abs(sum(split) - 1.0) < 1e-9:
        counts = [int(round(s * n_phantoms)) for s in split]
        counts[0] += n_phantoms - sum(counts)
        counts = tuple(counts)
    else:
        raise ValueError(
            "split must be either counts summing to n_phantoms or ratios summing to 1"
        )
    if min(counts) < 0:
        raise ValueError("split produced a negative count")
    return counts


def generate_dataset(
    out_dir,
    n_phantoms,
    split,
    geometry,
    master_seed,
    settings=None,
):
    """Simulate phantoms into a directory tree and write its manifest.

    Layout: ``<split>/<sample_id>/{phantom, label, y_low, b, lesion_mask,
    meta.json}``.  The split is phantom-level, so no phantom contributes to
    two splits.  The returned manifest dictionary is also written as
    ``manifest.json``.
    """
    settings = settings or SimulationSettings()
    counts = _resolve_split(split, n_phantoms)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model_high = SystemModel(geometry, psf_fwhm_mm=settings.psf_high_mm)
    model_low = SystemModel(geometry, psf_fwhm_mm=settings.psf_low_mm)

    split_names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    samples = {}
    for index in range(n_phantoms):
        sample_id = f"s{index:03d}"
        split_name = split_names[index]
        spec_rng = rng_for(master_seed, index, 0)
        high_rng = rng_for(master_seed, index, 1)
        low_rng = rng_for(master_seed, index, 2)

        spec = random_phantom_spec(geometry, spec_rng)
        phantom, lesion_mask = render_phantom(spec, geometry)

        high = simulate_scan(
            phantom, model_high, settings.scaled_high, settings.background_fraction, high_rng
        )
        low = simulate_scan(
            phantom, model_low, settings.scaled_low, settings.background_fraction, low_rng
        )
        label_high_scale = make_label(high.counts, high.background, model_high)
        # express the label in the low scan's activity units so inputs and
        # targets share one intensity scale
        label = label_high_scale * (low.scale / high.scale)
        truth = phantom * low.scale

        sample_dir = out_dir / split_name / sample_id
        sample_dir.mkdir(parents=True, exist_ok=True)
        formats.write_img1(sample_dir / "phantom.img1", truth)
        formats.write_img1(sample_dir / "label.img1", label)
        formats.write_sin1(sample_dir / "y_low.sin1", low.counts)
        formats.write_sin1(sample_dir / "b.sin1", low.background)
        formats.write_img1(sample_dir / "lesion_mask.img1", lesion_mask.astype(np.float64))
        meta = {
            "sample_id": sample_id,
            "split": split_name,
            "master_seed": int(master_seed),
            "phantom_index": index,
            "count_level": settings.scaled_low,
            "high_count_level": settings.scaled_high,
            "background_fraction": settings.background_fraction,
            "psf_high_mm": settings.psf_high_mm,
            "psf_low_mm": settings.psf_low_mm,
            "scale_low": low.scale,
            "scale_high": high.scale,
            "geometry_hash": geometry_hash(geometry, settings.psf_low_mm),
        }
        with open(sample_dir / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

        file_names = [
            "phantom.img1",
            "label.img1",
            "y_low.sin1",
            "b.sin1",
            "lesion_mask.img1",
            "meta.json",
        ]
        samples[sample_id] = {
            "split": split_name,
            "files": {name: formats.file_sha256(sample_dir / name) for name in file_names},
        }

    manifest = {
        "format": "transem-dataset/1",
        "master_seed": int(master_seed),
        "n_phantoms": n_phantoms,
        "split_counts": {"train": counts[0], "val": counts[1], "test": counts[2]},
        "geometry": geometry_to_dict(geometry),
        "psf_high_mm": settings.psf_high_mm,
        "psf_low_mm": settings.psf_low_mm,
        "count_level": settings.scaled_low,
        "high_count_level": settings.scaled_high,
        "background_fraction": settings.background_fraction,
        "samples": samples,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class Sample:
    sample_id: str
    split: str
    phantom: np.ndarray
    label: np.ndarray
    y_low: np.ndarray
    background: np.ndarray
    lesion_mask: np.ndarray
    meta: dict


class Dataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, root, manifest, samples):
        self.root = Path(root)
        self.manifest = manifest
        self.samples = samples

    @classmethod
    def load(cls, root):
        root = Path(root)
        with open(root / "manifest.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        samples = {}
        for sample_id, entry in sorted(manifest["samples"].items()):
            sample_dir = root / entry["split"] / sample_id
            with open(sample_dir / "meta.json", "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            samples[sample_id] = Sample(
                sample_id=sample_id,
                split=entry["split"],
                phantom=formats.read_img1(sample_dir / "phantom.img1"),
                label=formats.read_img1(sample_dir / "label.img1"),
                y_low=formats.read_sin1(sample_dir / "y_low.sin1"),
                background=formats.read_sin1(sample_dir / "b.sin1"),
                lesion_mask=formats.read_img1(sample_dir / "lesion_mask.img1") > 0.5,
                meta=meta,
            )
        return cls(root, manifest, samples)

    def split_samples(self, split_name):
        return [s for s in self.samples.values() if s.split == split_name]

    @property
    def geometry(self):
        from .system import geometry_from_dict

        geometry, _ = geometry_from_dict(self.manifest["geometry"])
        return geometry

    def low_count_model(self):
        """System model matched to the low-count scans (their PSF)."""
        return SystemModel(self.geometry, psf_fwhm_mm=self.manifest["psf_low_mm"])
