"""Classic iterative solvers for the Poisson projection model: ML-EM, OSEM
and quadratically penalized MAP-EM via the separable-surrogate update.

All updates are multiplicative fixed-point steps that preserve
nonnegativity.  The core per-subset EM kernel is shared by every solver
(and by the unrolled reconstructor), so "one subset" and "full data" follow
literally the same code path and degenerate cases agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ReconConfig",
    "em_subset_step",
    "mlem_update",
    "osem_reconstruct",
    "mapem_update",
    "mapem_reconstruct",
    "poisson_loglik",
    "poisson_loglik_gradient",
    "quadratic_penalty",
    "penalized_objective",
    "initial_image",
]

DEFAULT_EPSILON = 1e-12


@dataclass
class ReconConfig:
    """Iteration plan shared by the classic solvers.

    ``n_subsets`` partitions the angles by interleaving (angle a goes to
    subset a mod n_subsets); ``beta`` weights the quadratic smoothing
    penalty and is only used by MAP-EM.
    """

    n_iterations: int = 10
    n_subsets: int = 6
    beta: float = 0.005
    epsilon_em: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.n_iterations < 1 or self.n_subsets < 1:
            raise ValueError("iteration and subset counts must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.epsilon_em <= 0:
            raise ValueError("epsilon_em must be positive")


def initial_image(model, value=1.0):
    """Constant starting image with unseen pixels pinned to zero."""
    n = model.geometry.image_size
    return np.full((n, n), float(value)) * model.pixel_mask


def em_subset_step(x, y_sub, b_sub, subset, epsilon):
    """One multiplicative EM update restricted to a subset's rays.

    Returns ``(x_new, saved)`` where ``saved`` carries the floored expected
    counts and the multiplicative factor, which the differentiable wrapper
    reuses for its backward pass.  Pixels the subset never sees keep their
    previous value; the expected-count denominator is floored at
    ``epsilon`` so empty bins cannot produce NaNs.
    """
    ybar = subset.forward(x) + b_sub
    ybar_floored = np.maximum(ybar, epsilon)
    ratio = y_sub / ybar_floored
    backprojected = subset.back(ratio)
    factor = backprojected / subset.safe_sensitivity
    factor = factor * subset.mask
    factor = factor + subset.inv_mask
    x_new = x * factor
    return x_new, (ybar, ybar_floored, factor)


def mlem_update(x_prev, y, b, model, epsilon=DEFAULT_EPSILON):
    """Full-data ML-EM update ``x * A^T(y / ybar) / s`` with ``ybar = Ax + b``."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if not np.any(x_prev > 0):
        raise ValueError("ML-EM cannot start from an all-zero image")
    full = model.full_data_operator
    x_new, _ = em_subset_step(x_prev, np.asarray(y, dtype=np.float64), b, full, epsilon)
    return x_new


def osem_reconstruct(y, b, model, config, x0=None):
    """Ordered-subsets EM: cycle interleaved angle subsets in fixed order."""
    subsets = model.subsets(config.n_subsets)
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = initial_image(model) if x0 is None else np.array(x0, dtype=np.float64)
    if not np.any(x > 0):
        raise ValueError("OSEM cannot start from an all-zero image")
    for _ in range(config.n_iterations):
        for subset in subsets:
            x, _ = em_subset_step(
                x,
                subset.slice_sinogram(y),
                subset.slice_sinogram(b),
                subset,
                config.epsilon_em,
            )
    return x


def _neighbor_sums(x):
    """Sum of 4-neighbor values and neighbor counts (no wraparound)."""
    total = np.zeros_like(x)
    count = np.zeros_like(x)
    total[1:, :] += x[:-1, :]
    count[1:, :] += 1.0
    total[:-1, :] += x[1:, :]
    count[:-1, :] += 1.0
    total[:, 1:] += x[:, :-1]
    count[:, 1:] += 1.0
    total[:, :-1] += x[:, 1:]
    count[:, :-1] += 1.0
    return total, count


def _depierro_root(x_em, x_prev, sensitivity, mask, beta):
    """Positive root of the separable-surrogate optimality condition.

    Per pixel the penalized surrogate maximizer solves

        2*beta*W * x^2 + (s - beta*T) * x - s * x_em = 0

    with W the neighbor count and T = sum_m w_jm (x_j + x_m).  The positive
    root is evaluated in the numerically stable branch for either sign of
    the linear coefficient.
    """
    neighbor_total, neighbor_count = _neighbor_sums(x_prev)
    a = 2.0 * beta * neighbor_count
    t = neighbor_count * x_prev + neighbor_total
    lin = sensitivity - beta * t
    c = sensitivity * x_em
    disc = np.sqrt(lin * lin + 2.0 * a * (2.0 * c))
    # root = (-lin + disc) / (2a)  ==  2c / (lin + disc); pick the stable form
    denom_pos = lin + disc
    with np.errstate(divide="ignore", invalid="ignore"):
        root_pos = np.where(denom_pos > 0, 2.0 * c / np.where(denom_pos > 0, denom_pos, 1.0), 0.0)
        root_neg = (disc - lin) / (2.0 * a)
    root = np.where(lin >= 0, root_pos, root_neg)
    return root * mask


def _mapem_subset_update(x, y_sub, b_sub, subset, beta, epsilon):
    x_em, _ = em_subset_step(x, y_sub, b_sub, subset, epsilon)
    if beta == 0.0:
        return x_em
    return _depierro_root(x_em, x, subset.safe_sensitivity, subset.mask, beta)


def mapem_update(x_prev, y, b, model, beta, epsilon=DEFAULT_EPSILON):
    """Full-data MAP-EM update for the 4-neighbor quadratic penalty.

    With ``beta = 0`` this is exactly :func:`mlem_update`, bit for bit.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if not np.any(x_prev > 0):
        raise ValueError("MAP-EM cannot start from an all-zero image")
    full = model.full_data_operator
    return _mapem_subset_update(
        x_prev, np.asarray(y, dtype=np.float64), np.asarray(b, dtype=np.float64), full, beta, epsilon
    )


def mapem_reconstruct(y, b, model, config, x0=None):
    """Ordered-subsets MAP-EM with the quadratic smoothing penalty."""
    subsets = model.subsets(config.n_subsets)
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = initial_image(model) if x0 is None else np.array(x0, dtype=np.float64)
    if not np.any(x > 0):
        raise ValueError("MAP-EM cannot start from an all-zero image")
    for _ in range(config.n_iterations):
        for subset in subsets:
            x = _mapem_subset_update(
                x,
                subset.slice_sinogram(y),
                subset.slice_sinogram(b),
                subset,
                config.beta,
                config.epsilon_em,
            )
    return x


def poisson_loglik(x, y, b, model, epsilon=DEFAULT_EPSILON):
    """Poisson log-likelihood sum_i y_i log(ybar_i) - ybar_i (constant dropped)."""
    ybar = model.forward_project(x) + np.asarray(b, dtype=np.float64)
    ybar = np.maximum(ybar, epsilon)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(y * np.log(ybar) - ybar))


def poisson_loglik_gradient(x, y, b, model, epsilon=DEFAULT_EPSILON):
    """Gradient of :func:`poisson_loglik` with respect to the image."""
    ybar = model.forward_project(x) + np.asarray(b, dtype=np.float64)
    ybar = np.maximum(ybar, epsilon)
    return model.back_project(np.asarray(y, dtype=np.float64) / ybar - 1.0)


def quadratic_penalty(x):
    """Quadratic smoothing penalty 0.25 * sum_j sum_{m in N_j} (x_j - x_m)^2.

    Each unordered 4-neighbor pair appears twice in the double sum, so the
    value equals half the sum of squared differences over distinct pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    horiz = np.sum((x[:, 1:] - x[:, :-1]) ** 2)
    vert = np.sum((x[1:, :] - x[:-1, :]) ** 2)
    return 0.5 * (horiz + vert)


def penalized_objective(x, y, b, model, beta, epsilon=DEFAULT_EPSILON):
    """Log-likelihood minus the weighted quadratic penalty."""
    return poisson_loglik(x, y, b, model, epsilon) - beta * quadratic_penalty(x)
