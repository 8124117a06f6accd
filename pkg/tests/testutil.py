"""Shared oracles and helpers for the test suite.

The gradient checker here is the independent reference for every
differentiability claim: central finite differences of the rebuilt forward
pass, never the engine's own backward.
"""

import numpy as np

from transem import autodiff as ad


def gradcheck(build_loss, tensors, h=1e-5, rtol=1e-4, atol=1e-7, max_entries=None):
    """Compare analytic gradients of ``build_loss()`` with central differences.

    ``build_loss`` must rebuild the scalar loss from the current tensor data
    every call.  ``tensors`` are the leaves to check; ``max_entries`` limits
    how many coordinates per tensor are probed (all by default).
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    ad.backward(loss)
    failures = []
    for t in tensors:
        analytic = np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
        base = t.data.copy()
        size = base.size
        if max_entries is not None and size > max_entries:
            picks = np.random.default_rng(size).choice(size, size=max_entries, replace=False)
        else:
            picks = range(size)
        for i in picks:
            plus = base.reshape(-1).copy()
            plus[i] += h
            t.data = plus.reshape(base.shape)
            f_plus = float(build_loss().data)
            minus = base.reshape(-1).copy()
            minus[i] -= h
            t.data = minus.reshape(base.shape)
            f_minus = float(build_loss().data)
            t.data = base
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            tol = atol + rtol * max(abs(a), abs(numeric))
            if abs(a - numeric) > tol:
                failures.append((i, a, numeric, abs(a - numeric)))
        t.data = base
    assert not failures, f"gradient mismatches: {failures[:5]}"


def weighted_sum_loss(expr_builder, weight):
    """Scalar loss <W, expr> used to probe ops with a generic cotangent."""
    w = ad.Tensor(weight)

    def build():
        return ad.sum_all(ad.mul(expr_builder(), w))

    return build


def random_tensor(rng, shape, requires_grad=True, low=-1.0, high=1.0):
    return ad.Tensor(rng.uniform(low, high, size=shape), requires_grad=requires_grad)
