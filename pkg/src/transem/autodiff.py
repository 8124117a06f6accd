"""Dense float64 tensors with tape-style reverse-mode automatic differentiation.

The engine is deliberately small: it provides exactly the operations the
windowed-attention regularizer and the unrolled training loop need, nothing
more.  Every operation records its inputs and a vector-Jacobian closure on
the tensor it creates; ``backward`` replays those closures in reverse
creation order, which is a valid topological order because an operation can
only consume tensors that already exist.

Conventions:

* all data is float64, row-major;
* no broadcasting between arrays -- shapes must match exactly, with the
  single exception of a scalar operand (0-d tensor or Python number);
* kernels are sequential with a fixed reduction order, so two forward or
  backward passes over the same graph are bitwise identical.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "no_grad",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "exp",
    "sqrt",
    "clip_min",
    "matmul",
    "softmax_lastdim",
    "gelu",
    "layer_norm",
    "conv2d_same",
    "bias_add",
    "sum_all",
    "reshape",
    "transpose",
    "pad_hw",
    "crop_hw",
    "roll_hw",
    "apply_linear",
    "make_op",
    "backward",
    "zero_grads",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ids = itertools.count()
_grad_enabled = True
_check_finite = False


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_check_finite(enabled):
    """Enable a debug assertion that every forward result is finite."""
    global _check_finite
    _check_finite = bool(enabled)


@contextmanager
def no_grad():
    """Context manager that suspends graph recording."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``requires_grad=True`` marks a leaf parameter.  Tensors produced by
    operations carry back-references to their inputs; leaves do not.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backs", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backs = ()
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        """Whether this tensor participates in the active graph."""
        return self.requires_grad or bool(self._backs)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars (Python numbers) are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _finite_check(arr, op_name):
    if _check_finite and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op_name}")


def make_op(data, parents_and_vjps, op_name="op"):
    """Create a tensor from an operation result.

    ``parents_and_vjps`` is a sequence of ``(tensor, vjp)`` pairs where
    ``vjp`` maps the output cotangent to that parent's cotangent.  Pairs
    whose parent is untracked are dropped; with grad recording disabled the
    result is a plain constant.
    """
    data = np.asarray(data, dtype=np.float64)
    _finite_check(data, op_name)
    out = Tensor(data)
    if _grad_enabled:
        backs = tuple((p, fn) for p, fn in parents_and_vjps if p.tracked)
        out._backs = backs
    return out


def backward(loss):
    """Reverse sweep from a scalar ``loss``.

    Accumulates into ``.grad`` of every tensor visited, so repeated calls
    without ``zero_grad`` add up.  Nodes are processed exactly once, in
    reverse creation order.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.ndim != 0:
        raise ShapeMismatchError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )

    # iterative reachability walk; graphs can be thousands of nodes deep
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for parent, _ in node._backs:
            if id(parent) not in seen:
                seen[id(parent)] = parent
                stack.append(parent)

    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)
    cotangents = {id(loss): np.asarray(1.0)}
    for node in order:
        g = cotangents.pop(id(node), None)
        if g is None:
            continue
        # only leaves keep a persistent gradient buffer
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad = node.grad + g
        for parent, vjp in node._backs:
            pg = vjp(g)
            prev = cotangents.get(id(parent))
            cotangents[id(parent)] = pg if prev is None else prev + pg


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise operations


def _binary_shapes(a, b, name):
    """Validate the equal-shape-or-scalar contract for a binary op."""
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeMismatchError(
        f"{name}: operand shapes {a.data.shape} and {b.data.shape} differ"
    )


def _reduce_to(grad, shape):
    # a scalar operand combined with an array receives the summed cotangent
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    return make_op(
        out,
        [
            (a, lambda g: _reduce_to(g, a.data.shape)),
            (b, lambda g: _reduce_to(g, b.data.shape)),
        ],
        "add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    return make_op(
        out,
        [
            (a, lambda g: _reduce_to(g, a.data.shape)),
            (b, lambda g: _reduce_to(-g, b.data.shape)),
        ],
        "sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    return make_op(
        out,
        [
            (a, lambda g: _reduce_to(g * b.data, a.data.shape)),
            (b, lambda g: _reduce_to(g * a.data, b.data.shape)),
        ],
        "mul",
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    return make_op(
        out,
        [
            (a, lambda g: _reduce_to(g / b.data, a.data.shape)),
            (b, lambda g: _reduce_to(-g * out / b.data, b.data.shape)),
        ],
        "div",
    )


def scale(a, c):
    """Multiply by a Python constant (kept out of the graph)."""
    c = float(c)
    out = a.data * c
    return make_op(out, [(a, lambda g: g * c)], "scale")


def exp(a):
    out = np.exp(a.data)
    return make_op(out, [(a, lambda g: g * out)], "exp")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_op(out, [(a, lambda g: g * (0.5 / out))], "sqrt")


def clip_min(a, floor):
    """Elementwise ``max(a, floor)`` with zero gradient on the clipped set."""
    floor = float(floor)
    out = np.maximum(a.data, floor)
    passthrough = a.data > floor
    return make_op(out, [(a, lambda g: g * passthrough)], "clip_min")


# ---------------------------------------------------------------------------
# linear algebra and neural-network kernels


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul operands must be at least 2-d")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions {a.data.shape} x {b.data.shape} disagree"
        )
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeMismatchError(
            f"matmul: batch dimensions {a.data.shape[:-2]} != {b.data.shape[:-2]}"
        )
    out = np.matmul(a.data, b.data)
    return make_op(
        out,
        [
            (a, lambda g: np.matmul(g, b.data.swapaxes(-1, -2))),
            (b, lambda g: np.matmul(a.data.swapaxes(-1, -2), g)),
        ],
        "matmul",
    )


def softmax_lastdim(a):
    """Softmax over the last dimension, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - inner)

    return make_op(out, [(a, vjp)], "softmax")


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x) with Phi computed through erf."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        density = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return g * (phi + x * density)

    return make_op(out, [(a, vjp)], "gelu")


def layer_norm(a, gamma, beta, eps=1e-5):
    """Standardize the last dimension per token, then apply gamma/beta."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    c = a.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError(
            f"layer_norm: parameter shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match channel count {c}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def vjp_a(g):
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - m1 - xhat * m2)

    def vjp_gamma(g):
        return (g * xhat).reshape(-1, c).sum(axis=0)

    def vjp_beta(g):
        return g.reshape(-1, c).sum(axis=0)

    return make_op(out, [(a, vjp_a), (gamma, vjp_gamma), (beta, vjp_beta)], "layer_norm")


def _im2col3(xpad, h, w):
    # [Cin, H, W, 3, 3] view -> [Cin*9, H*W] copy, (channel, dy, dx) major
    windows = sliding_window_view(xpad, (3, 3), axis=(1, 2))
    return windows.transpose(0, 3, 4, 1, 2).reshape(-1, h * w)


def conv2d_same(x, kernel, bias):
    """3x3 cross-correlation with stride 1 and zero padding 1.

    ``x`` is [C_in, H, W], ``kernel`` is [C_out, C_in, 3, 3] and ``bias`` is
    [C_out]; the output keeps the spatial size.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 3 or kd.ndim != 4:
        raise ShapeMismatchError("conv2d_same expects [C,H,W] input and [O,I,3,3] kernel")
    if kd.shape[2:] != (3, 3):
        raise ShapeMismatchError(f"conv2d_same kernel must be 3x3, got {kd.shape[2:]}")
    if kd.shape[1] != xd.shape[0]:
        raise ShapeMismatchError(
            f"conv2d_same: input has {xd.shape[0]} channels, kernel expects {kd.shape[1]}"
        )
    if bd.shape != (kd.shape[0],):
        raise ShapeMismatchError(
            f"conv2d_same: bias shape {bd.shape} does not match {kd.shape[0]} outputs"
        )
    c_out, c_in = kd.shape[0], kd.shape[1]
    h, w = xd.shape[1], xd.shape[2]
    xpad = np.pad(xd, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xpad, h, w)
    kmat = kd.reshape(c_out, c_in * 9)
    out = (kmat @ cols).reshape(c_out, h, w) + bd[:, None, None]

    def vjp_x(g):
        gmat = g.reshape(c_out, h * w)
        colgrad = (kmat.T @ gmat).reshape(c_in, 3, 3, h, w)
        gpad = np.zeros((c_in, h + 2, w + 2))
        for dy in range(3):
            for dx in range(3):
                gpad[:, dy:dy + h, dx:dx + w] += colgrad[:, dy, dx]
        return gpad[:, 1:h + 1, 1:w + 1]

    def vjp_k(g):
        gmat = g.reshape(c_out, h * w)
        cols_again = _im2col3(np.pad(x.data, ((0, 0), (1, 1), (1, 1))), h, w)
        return (gmat @ cols_again.T).reshape(kd.shape)

    def vjp_b(g):
        return g.sum(axis=(1, 2))

    return make_op(out, [(x, vjp_x), (kernel, vjp_k), (bias, vjp_b)], "conv2d_same")


def bias_add(a, bias):
    """Add a 1-d bias along the last dimension (the only sanctioned broadcast)."""
    c = a.data.shape[-1]
    if bias.data.shape != (c,):
        raise ShapeMismatchError(
            f"bias_add: bias shape {bias.data.shape} does not match last dim {c}"
        )
    out = a.data + bias.data
    return make_op(
        out,
        [(a, lambda g: g), (bias, lambda g: g.reshape(-1, c).sum(axis=0))],
        "bias_add",
    )


# ---------------------------------------------------------------------------
# structural operations


def sum_all(a):
    out = a.data.sum()
    shape = a.data.shape
    return make_op(out, [(a, lambda g: np.full(shape, float(g)))], "sum_all")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    out = a.data.reshape(shape)
    return make_op(out, [(a, lambda g: g.reshape(old))], "reshape")


def transpose(a, axes):
    axes = tuple(int(ax) for ax in axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return make_op(out, [(a, lambda g: g.transpose(inverse))], "transpose")


def pad_hw(a, pads):
    """Zero-pad the last two dimensions by ((top, bottom), (left, right))."""
    (top, bottom), (left, right) = pads
    widths = [(0, 0)] * (a.data.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(a.data, widths)
    h, w = a.data.shape[-2], a.data.shape[-1]

    def vjp(g):
        return g[..., top:top + h, left:left + w]

    return make_op(out, [(a, vjp)], "pad_hw")


def crop_hw(a, top, left, height, width):
    """Crop the last two dimensions to a window; adjoint of zero padding."""
    src_h, src_w = a.data.shape[-2], a.data.shape[-1]
    out = a.data[..., top:top + height, left:left + width]

    def vjp(g):
        full = np.zeros(a.data.shape)
        full[..., top:top + height, left:left + width] = g
        return full

    return make_op(out, [(a, vjp)], "crop_hw")


def roll_hw(a, shift_h, shift_w):
    """Cyclic shift of the last two dimensions."""
    out = np.roll(a.data, (shift_h, shift_w), axis=(-2, -1))

    def vjp(g):
        return np.roll(g, (-shift_h, -shift_w), axis=(-2, -1))

    return make_op(out, [(a, vjp)], "roll_hw")


def apply_linear(a, forward, adjoint, op_name="linear"):
    """Apply a frozen linear operator given as (forward, adjoint) callables."""
    out = forward(a.data)
    return make_op(out, [(a, lambda g: adjoint(g))], op_name)
