"""Unrolled reconstruction: blocks of {subset EM update, learned
regularization, closed-form fusion}, trained end to end.

Each block takes the previous image estimate, runs one ordered-subsets EM
update on its angle subset, pushes the same estimate through the learned
regularizer, and merges both with a pixelwise closed form: the merged value
is the positive root of

    x^2 / (alpha * s) + (1 - r / (alpha * s)) * x - x_em = 0

which maximizes the separable EM surrogate penalized by a proximity term
``||x - r||^2 / (2 alpha)``.  Gradients flow through the EM ratio and the
closed form, so the step sizes (one positive ``alpha`` per block, stored as
``exp(log_alpha)``) and the regularizer train jointly against an MSE loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import read_named_arrays, write_named_arrays
from .recon import DEFAULT_EPSILON, em_subset_step, initial_image
from .rstr import (
    init_residual_cnn,
    init_rstr,
    load_regularizer,
    regularizer_forward,
    save_regularizer,
)

__all__ = [
    "TransEMConfig",
    "TransEMModel",
    "TrainResult",
    "TrainingDiverged",
    "fusion_update",
    "transem_block",
    "reconstruct",
    "reconstruct_graph",
    "adam_step",
    "Adam",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
]

_CKPT_MAGIC = b"TEM1"
_CKPT_VERSION = 1
_TINY = 1e-30


# ---------------------------------------------------------------------------
# fusion


def _fusion_kernel(x_em, r, alpha_s):
    """Stable positive root of the fusion quadratic, plus the discriminant root.

    Written with the cancellation-free branch for either sign of
    ``1 - r / (alpha * s)``; the root of the discriminant is also the
    derivative of the quadratic at the solution, which the backward pass
    reuses.
    """
    one = 1.0 - r / alpha_s
    disc = one * one + 4.0 * (x_em / alpha_s)
    root = np.sqrt(disc)
    denom = np.maximum(one + root, _TINY)
    with np.errstate(invalid="ignore"):
        fused = np.where(one >= 0, 2.0 * x_em / denom, alpha_s * (root - one) / 2.0)
    return fused, root


def fusion_update(x_em, r, alpha, sensitivity):
    """Pixelwise closed-form fusion of an EM estimate and a reference image.

    ``alpha`` must be positive and ``sensitivity`` strictly positive; the
    output is nonnegative and equals ``x_em`` in the ``alpha -> inf`` limit
    and (the positive part of) ``r`` as ``alpha -> 0``.
    """
    alpha = float(alpha)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sensitivity = np.asarray(sensitivity, dtype=np.float64)
    if np.any(sensitivity <= 0):
        raise ValueError("sensitivity must be strictly positive where fused")
    x_em = np.asarray(x_em, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    fused, _ = _fusion_kernel(x_em, r, alpha * sensitivity)
    return fused


def _fusion_op(x_em_t, r_t, alpha_t, subset):
    """Differentiable fusion; pixels unseen by the subset pass ``x_em`` through."""
    s_safe = subset.safe_sensitivity
    mask, inv_mask = subset.mask, subset.inv_mask
    alpha = float(alpha_t.data)
    a = alpha * s_safe
    fused, root = _fusion_kernel(x_em_t.data, r_t.data, a)
    out = fused * mask + x_em_t.data * inv_mask
    d = np.maximum(root, _TINY)  # derivative of the quadratic at the root
    r_data = r_t.data

    def vjp_x_em(g):
        return g * (mask / d + inv_mask)

    def vjp_r(g):
        return g * mask * (fused / a) / d

    def vjp_alpha(g):
        return np.sum(g * mask * fused * (fused - r_data) / (a * a * d) * s_safe)

    return ad.make_op(
        out, [(x_em_t, vjp_x_em), (r_t, vjp_r), (alpha_t, vjp_alpha)], "fusion"
    )


# ---------------------------------------------------------------------------
# differentiable EM step


def _em_op(x_t, subset, y_sub, b_sub, epsilon):
    """Subset EM update as one graph node (same kernel as the classic solvers)."""
    x_new, (ybar, ybar_floored, factor) = em_subset_step(
        x_t.data, y_sub, b_sub, subset, epsilon
    )
    active = ybar > epsilon
    x_data = x_t.data
    scaled_mask = subset.mask / subset.safe_sensitivity

    def vjp(g):
        u = g * x_data * scaled_mask
        projected = subset.forward(u)
        w = -(y_sub / (ybar_floored * ybar_floored)) * active * projected
        return g * factor + subset.back(w)

    return ad.make_op(x_new, [(x_t, vjp)], "em_subset")


# ---------------------------------------------------------------------------
# model


@dataclass
class TransEMConfig:
    """Unrolling plan and regularizer hyperparameters.

    The block count is ``n_iterations * n_subsets``; one regularizer is
    shared across blocks unless ``share_weights`` is off.  ``alpha_init``
    seeds every per-block step size (kept positive through the log
    parameterization).
    """

    n_iterations: int = 10
    n_subsets: int = 6
    share_weights: bool = True
    regularizer: str = "rstr"
    embed_dim: int = 32
    n_heads: int = 4
    window_size: int = 4
    mlp_ratio: int = 2
    outer_residual: bool = True
    shift_windows: bool = False
    alpha_init: float = 1.0
    epsilon_em: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.n_iterations < 1 or self.n_subsets < 1:
            raise ValueError("iteration and subset counts must be >= 1")
        if self.alpha_init <= 0:
            raise ValueError("alpha_init must be positive")
        if self.regularizer not in ("rstr", "cnn"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")

    @property
    def n_blocks(self):
        return self.n_iterations * self.n_subsets


class TransEMModel:
    """Trainable state: regularizer parameter set(s) plus per-block log-alpha."""

    def __init__(self, config, regularizers, log_alpha):
        self.config = config
        self.regularizers = regularizers
        self.log_alpha = log_alpha

    @classmethod
    def create(cls, config, seed=0):
        n_regs = 1 if config.share_weights else config.n_blocks
        regularizers = []
        for i in range(n_regs):
            if config.regularizer == "rstr":
                regularizers.append(
                    init_rstr(
                        embed_dim=config.embed_dim,
                        n_heads=config.n_heads,
                        window_size=config.window_size,
                        mlp_ratio=config.mlp_ratio,
                        seed=seed + i,
                        outer_residual=config.outer_residual,
                        shift_windows=config.shift_windows,
                    )
                )
            else:
                regularizers.append(
                    init_residual_cnn(
                        embed_dim=config.embed_dim,
                        seed=seed + i,
                        outer_residual=config.outer_residual,
                    )
                )
        log_alpha = [
            Tensor(np.log(config.alpha_init), requires_grad=True)
            for _ in range(config.n_blocks)
        ]
        return cls(config, regularizers, log_alpha)

    def block_regularizer(self, block_index):
        if self.config.share_weights:
            return self.regularizers[0]
        return self.regularizers[block_index]

    def named_parameters(self):
        named = []
        for i, reg in enumerate(self.regularizers):
            named.extend(reg.named_parameters(f"reg{i}."))
        for i, la in enumerate(self.log_alpha):
            named.append((f"log_alpha.{i}", la))
        return named

    def parameters(self):
        return [tensor for _, tensor in self.named_parameters()]

    def alphas(self):
        return np.array([float(np.exp(la.data)) for la in self.log_alpha])

    def state_snapshot(self):
        return [np.array(t.data) for t in self.parameters()]

    def load_snapshot(self, snapshot):
        for tensor, data in zip(self.parameters(), snapshot):
            tensor.data = np.array(data)


def transem_block(
    x_t, y, b, subset, reg_params, log_alpha_t, epsilon=DEFAULT_EPSILON, em_only=False
):
    """One unrolled block: subset EM, regularize the incoming image, fuse."""
    y_sub = subset.slice_sinogram(y)
    b_sub = subset.slice_sinogram(b)
    x_em_t = _em_op(x_t, subset, y_sub, b_sub, epsilon)
    if em_only:
        return x_em_t
    h, w = x_t.data.shape
    reference = ad.reshape(
        regularizer_forward(ad.reshape(x_t, (1, h, w)), reg_params), (h, w)
    )
    alpha_t = ad.exp(log_alpha_t)
    return _fusion_op(x_em_t, reference, alpha_t, subset)


def reconstruct_graph(y, b, model, tmodel, em_only=False, x0=None):
    """Full unrolled forward pass, returned as a graph tensor."""
    config = tmodel.config
    subsets = model.subsets(config.n_subsets)
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = Tensor(initial_image(model) if x0 is None else np.array(x0, dtype=np.float64))
    for i in range(config.n_blocks):
        subset = subsets[i % config.n_subsets]
        x = transem_block(
            x,
            y,
            b,
            subset,
            tmodel.block_regularizer(i),
            tmodel.log_alpha[i],
            epsilon=config.epsilon_em,
            em_only=em_only,
        )
    return x


def reconstruct(y, b, model, tmodel, em_only=False, x0=None):
    """Inference-mode reconstruction (no graph kept)."""
    with ad.no_grad():
        return reconstruct_graph(y, b, model, tmodel, em_only=em_only, x0=x0).data


# ---------------------------------------------------------------------------
# optimization


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (param, m, v) as new arrays."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    param, grad = np.asarray(param), np.asarray(grad)
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError("adam_step buffers must share the parameter shape")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class Adam:
    """Adam over a list of parameter tensors, reading their ``.grad``.

    ``warmup_steps`` linearly ramps the learning rate over the first steps,
    which tames the overshoot of the earliest bias-corrected updates.
    """

    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8, warmup_steps=0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = int(warmup_steps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        lr = self.lr
        if self.warmup_steps > 0 and self.t <= self.warmup_steps:
            lr = self.lr * self.t / self.warmup_steps
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[i], self.v[i] = adam_step(
                p.data, grad, self.m[i], self.v[i], self.t,
                lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)  # (step, train_loss)
    val_curve: list = field(default_factory=list)  # (step, val_psnr)
    best_val_psnr: float = -np.inf
    best_step: int = 0
    log_rows: list = field(default_factory=list)  # (step, loss, val or "")


def _val_psnr(samples, model, tmodel):
    from .metrics import normalize_max1, psnr

    values = []
    for sample in samples:
        recon = reconstruct(sample.y_low, sample.background, model, tmodel)
        if recon.max() <= 0 or sample.label.max() <= 0:
            values.append(-np.inf)
            continue
        values.append(psnr(normalize_max1(sample.label), normalize_max1(recon)))
    return float(np.mean(values)) if values else -np.inf


def train(
    tmodel,
    dataset,
    model=None,
    *,
    epochs=50,
    max_steps=None,
    lr=5e-5,
    batch_size=4,
    seed=0,
    val_every=1,
    warmup_steps=0,
    dump_dir=None,
):
    """Train against the dataset labels with batch-averaged MSE and Adam.

    Batches are drawn by a seeded shuffle each epoch and processed in a
    fixed order, so the whole run is bitwise reproducible.  Validation PSNR
    is computed every ``val_every`` epochs and the best-validation parameter
    snapshot is restored into the model at the end.  A non-finite loss
    aborts with :class:`TrainingDiverged` (after dumping a checkpoint when
    ``dump_dir`` is given).
    """
    if model is None:
        model = dataset.low_count_model()
    train_samples = sorted(dataset.split_samples("train"), key=lambda s: s.sample_id)
    val_samples = sorted(dataset.split_samples("val"), key=lambda s: s.sample_id)
    if not train_samples:
        raise ValueError("dataset has no training samples")

    loss_mask = model.pixel_mask
    n_effective = float(loss_mask.sum())
    params = tmodel.parameters()
    optimizer = Adam(params, lr=lr, warmup_steps=warmup_steps)
    shuffle_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), 424242]))
    )

    result = TrainResult()
    best_snapshot = tmodel.state_snapshot()
    if val_samples:
        result.best_val_psnr = _val_psnr(val_samples, model, tmodel)
        result.val_curve.append((0, result.best_val_psnr))

    step = 0
    stop = False
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_samples))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            batch_loss = 0.0
            for index in batch:
                sample = train_samples[int(index)]
                recon_t = reconstruct_graph(
                    sample.y_low, sample.background, model, tmodel
                )
                diff = ad.mul(ad.sub(recon_t, Tensor(sample.label)), Tensor(loss_mask))
                loss_t = ad.scale(
                    ad.sum_all(ad.mul(diff, diff)), 1.0 / (n_effective * len(batch))
                )
                ad.backward(loss_t)
                batch_loss += float(loss_t.data)
            if not np.isfinite(batch_loss):
                dump_path = None
                if dump_dir is not None:
                    from pathlib import Path

                    dump_path = str(Path(dump_dir) / "diverged.tem1")
                    save_checkpoint(
                        dump_path, tmodel, extra={"step": step, "loss": repr(batch_loss)}
                    )
                raise TrainingDiverged(
                    f"non-finite loss at step {step}", dump_path=dump_path
                )
            optimizer.step()
            optimizer.zero_grad()
            step += 1
            result.loss_curve.append((step, batch_loss))
            result.log_rows.append((step, batch_loss, ""))
            if max_steps is not None and step >= max_steps:
                stop = True
                break
        if val_samples and (epoch % val_every == 0 or stop or epoch == epochs - 1):
            val_psnr = _val_psnr(val_samples, model, tmodel)
            result.val_curve.append((step, val_psnr))
            if result.log_rows:
                last = result.log_rows[-1]
                result.log_rows[-1] = (last[0], last[1], val_psnr)
            if val_psnr > result.best_val_psnr:
                result.best_val_psnr = val_psnr
                result.best_step = step
                best_snapshot = tmodel.state_snapshot()
        if stop:
            break

    if val_samples:
        tmodel.load_snapshot(best_snapshot)
    return result


def write_training_log(path, rows):
    """CSV of (step, train_loss, val_psnr); floats use repr for stable bytes."""
    lines = ["step,train_loss,val_psnr"]
    for step, loss, val in rows:
        val_text = repr(float(val)) if val != "" else ""
        lines.append(f"{step},{repr(float(loss))},{val_text}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, tmodel, extra=None):
    """TEM1 container: magic, version, config JSON, named parameter records."""
    config = asdict(tmodel.config)
    config["n_regularizers"] = len(tmodel.regularizers)
    if extra:
        config["extra"] = extra
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    records = [(name, tensor.data) for name, tensor in tmodel.named_parameters()]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        write_named_arrays(fh, records)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a TEM1 checkpoint: magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        config_doc = json.loads(fh.read(blob_len).decode("utf-8"))
        records = read_named_arrays(fh)
    config_fields = {f.name for f in TransEMConfig.__dataclass_fields__.values()}
    config = TransEMConfig(**{k: v for k, v in config_doc.items() if k in config_fields})
    tmodel = TransEMModel.create(config, seed=0)
    values = dict(records)
    for name, tensor in tmodel.named_parameters():
        data = values[name]
        if tuple(data.shape) != tensor.data.shape:
            raise ValueError(f"checkpoint record {name} has shape {data.shape}")
        tensor.data = data
    return tmodel
