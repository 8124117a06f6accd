"""Image-domain regularizer networks.

The main regularizer is a residual block around a single windowed-attention
transformer layer: a 3x3 convolution lifts the image to an embedding, the
transformer layer mixes tokens inside non-overlapping MxM windows
(pre-LayerNorm multi-head self-attention and a GELU MLP, each with a
residual connection), and a second 3x3 convolution folds the features back
to one channel which is added to the block input.

A plain residual CNN (conv-GELU-conv-GELU-conv with the same outer
residual) is provided as the ablation regularizer.

With the three output projections (attention output, MLP second layer,
final convolution) initialized to zero both networks are exactly the
identity map, so an untrained unrolled reconstruction reduces to ordered
subsets EM.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "STLParams",
    "RSTRParams",
    "ResidualCNNParams",
    "init_rstr",
    "init_residual_cnn",
    "window_partition",
    "window_merge",
    "window_msa",
    "stl_forward",
    "rstr_forward",
    "residual_cnn_forward",
    "regularizer_forward",
    "save_regularizer",
    "load_regularizer",
]

_CKPT_MAGIC = b"RSTR"
_CKPT_VERSION = 1


@dataclass
class STLParams:
    """Single transformer layer acting on window token sequences."""

    embed_dim: int
    n_heads: int
    window_size: int
    mlp_ratio: int
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")

    def named_parameters(self, prefix=""):
        names = [
            "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
            "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        ]
        return [(prefix + name, getattr(self, name)) for name in names]


@dataclass
class RSTRParams:
    """Residual conv -> transformer layer -> conv regularizer."""

    conv_in_kernel: Tensor
    conv_in_bias: Tensor
    stl: STLParams
    conv_out_kernel: Tensor
    conv_out_bias: Tensor
    outer_residual: bool = True
    shift_windows: bool = False

    kind = "rstr"

    def named_parameters(self, prefix=""):
        own = [
            (prefix + "conv_in_kernel", self.conv_in_kernel),
            (prefix + "conv_in_bias", self.conv_in_bias),
            (prefix + "conv_out_kernel", self.conv_out_kernel),
            (prefix + "conv_out_bias", self.conv_out_bias),
        ]
        return own + self.stl.named_parameters(prefix + "stl.")

    def config_dict(self):
        return {
            "kind": self.kind,
            "embed_dim": self.stl.embed_dim,
            "n_heads": self.stl.n_heads,
            "window_size": self.stl.window_size,
            "mlp_ratio": self.stl.mlp_ratio,
            "outer_residual": self.outer_residual,
            "shift_windows": self.shift_windows,
        }


@dataclass
class ResidualCNNParams:
    """Three-convolution residual regularizer (the CNN ablation)."""

    conv1_kernel: Tensor
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor
    conv3_kernel: Tensor
    conv3_bias: Tensor
    outer_residual: bool = True

    kind = "cnn"

    def named_parameters(self, prefix=""):
        names = [
            "conv1_kernel", "conv1_bias", "conv2_kernel", "conv2_bias",
            "conv3_kernel", "conv3_bias",
        ]
        return [(prefix + name, getattr(self, name)) for name in names]

    def config_dict(self):
        return {
            "kind": self.kind,
            "embed_dim": self.conv1_kernel.data.shape[0],
            "outer_residual": self.outer_residual,
        }


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def init_rstr(
    embed_dim=32,
    n_heads=4,
    window_size=4,
    mlp_ratio=2,
    seed=0,
    identity_init=True,
    outer_residual=True,
    shift_windows=False,
):
    """Fresh regularizer parameters.

    ``identity_init`` zeroes the attention output projection, the MLP
    second layer and the final convolution so the whole network starts as
    the identity map (the default); disabling it randomizes everything,
    which the gradient-coverage tests use.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    c, hidden = embed_dim, embed_dim * mlp_ratio

    def linear(fan_in, fan_out, zero=False):
        if zero:
            return _param(np.zeros((fan_in, fan_out))), _param(np.zeros(fan_out))
        return (
            _param(_glorot(rng, (fan_in, fan_out), fan_in, fan_out)),
            _param(np.zeros(fan_out)),
        )

    def conv(c_out, c_in, zero=False):
        if zero:
            kernel = np.zeros((c_out, c_in, 3, 3))
        else:
            kernel = _glorot(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9)
        return _param(kernel), _param(np.zeros(c_out))

    conv_in_k, conv_in_b = conv(c, 1)
    w_q, b_q = linear(c, c)
    w_k, b_k = linear(c, c)
    w_v, b_v = linear(c, c)
    w_o, b_o = linear(c, c, zero=identity_init)
    mlp_w1, mlp_b1 = linear(c, hidden)
    mlp_w2, mlp_b2 = linear(hidden, c, zero=identity_init)
    conv_out_k, conv_out_b = conv(1, c, zero=identity_init)

    stl = STLParams(
        embed_dim=c,
        n_heads=n_heads,
        window_size=window_size,
        mlp_ratio=mlp_ratio,
        w_q=w_q, b_q=b_q, w_k=w_k, b_k=b_k, w_v=w_v, b_v=b_v, w_o=w_o, b_o=b_o,
        ln1_gamma=_param(np.ones(c)), ln1_beta=_param(np.zeros(c)),
        ln2_gamma=_param(np.ones(c)), ln2_beta=_param(np.zeros(c)),
        mlp_w1=mlp_w1, mlp_b1=mlp_b1, mlp_w2=mlp_w2, mlp_b2=mlp_b2,
    )
    return RSTRParams(
        conv_in_kernel=conv_in_k,
        conv_in_bias=conv_in_b,
        stl=stl,
        conv_out_kernel=conv_out_k,
        conv_out_bias=conv_out_b,
        outer_residual=outer_residual,
        shift_windows=shift_windows,
    )


def init_residual_cnn(embed_dim=32, seed=0, identity_init=True, outer_residual=True):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    c = embed_dim

    def conv(c_out, c_in, zero=False):
        if zero:
            kernel = np.zeros((c_out, c_in, 3, 3))
        else:
            kernel = _glorot(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9)
        return _param(kernel), _param(np.zeros(c_out))

    k1, b1 = conv(c, 1)
    k2, b2 = conv(c, c)
    k3, b3 = conv(1, c, zero=identity_init)
    return ResidualCNNParams(
        conv1_kernel=k1, conv1_bias=b1,
        conv2_kernel=k2, conv2_bias=b2,
        conv3_kernel=k3, conv3_bias=b3,
        outer_residual=outer_residual,
    )


# ---------------------------------------------------------------------------
# window bookkeeping


def window_partition(x, window_size):
    """Reshape [C, H, W] features into [n_windows, M*M, C] token groups.

    Sides that are not multiples of ``window_size`` get symmetric zero
    padding first; the returned pad info makes :func:`window_merge` an exact
    inverse.
    """
    c, h, w = x.data.shape
    m = window_size
    pad_h = (-h) % m
    pad_w = (-w) % m
    top, left = pad_h // 2, pad_w // 2
    if pad_h or pad_w:
        x = ad.pad_hw(x, ((top, pad_h - top), (left, pad_w - left)))
    hp, wp = h + pad_h, w + pad_w
    n_h, n_w = hp // m, wp // m
    t = ad.reshape(x, (c, n_h, m, n_w, m))
    t = ad.transpose(t, (1, 3, 2, 4, 0))
    tokens = ad.reshape(t, (n_h * n_w, m * m, c))
    pad_info = (c, h, w, top, left, n_h, n_w, m)
    return tokens, pad_info


def window_merge(tokens, pad_info):
    """Inverse of :func:`window_partition` (padding cropped away)."""
    c, h, w, top, left, n_h, n_w, m = pad_info
    t = ad.reshape(tokens, (n_h, n_w, m, m, c))
    t = ad.transpose(t, (4, 0, 2, 1, 3))
    x = ad.reshape(t, (c, n_h * m, n_w * m))
    if (n_h * m, n_w * m) != (h, w):
        x = ad.crop_hw(x, top, left, h, w)
    return x


def window_msa(tokens, params):
    """Multi-head self-attention applied independently inside each window."""
    n_windows, n_tokens, c = tokens.data.shape
    heads = params.n_heads
    head_dim = c // heads
    flat = ad.reshape(tokens, (n_windows * n_tokens, c))

    def project(w, b):
        p = ad.bias_add(ad.matmul(flat, w), b)
        p = ad.reshape(p, (n_windows, n_tokens, heads, head_dim))
        return ad.transpose(p, (0, 2, 1, 3))  # [windows, heads, tokens, dim]

    q = project(params.w_q, params.b_q)
    k = project(params.w_k, params.b_k)
    v = project(params.w_v, params.b_v)

    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    attention = ad.softmax_lastdim(logits)
    mixed = ad.matmul(attention, v)
    mixed = ad.transpose(mixed, (0, 2, 1, 3))
    mixed = ad.reshape(mixed, (n_windows * n_tokens, c))
    out = ad.bias_add(ad.matmul(mixed, params.w_o), params.b_o)
    return ad.reshape(out, (n_windows, n_tokens, c))


def stl_forward(x, params):
    """Transformer layer on [C, H, W] features; spatial shape is preserved."""
    tokens, pad_info = window_partition(x, params.window_size)
    attended = window_msa(ad.layer_norm(tokens, params.ln1_gamma, params.ln1_beta), params)
    tokens = ad.add(attended, tokens)

    n_windows, n_tokens, c = tokens.data.shape
    normed = ad.layer_norm(tokens, params.ln2_gamma, params.ln2_beta)
    flat = ad.reshape(normed, (n_windows * n_tokens, c))
    hidden = ad.gelu(ad.bias_add(ad.matmul(flat, params.mlp_w1), params.mlp_b1))
    mlp_out = ad.bias_add(ad.matmul(hidden, params.mlp_w2), params.mlp_b2)
    mlp_out = ad.reshape(mlp_out, (n_windows, n_tokens, c))
    tokens = ad.add(mlp_out, tokens)
    return window_merge(tokens, pad_info)


def rstr_forward(x, params):
    """Regularizer forward pass on a [1, H, W] tensor."""
    inputs = x
    if params.shift_windows:
        shift = params.stl.window_size // 2
        x = ad.roll_hw(x, -shift, -shift)
    features = ad.conv2d_same(x, params.conv_in_kernel, params.conv_in_bias)
    deep = stl_forward(features, params.stl)
    out = ad.conv2d_same(deep, params.conv_out_kernel, params.conv_out_bias)
    if params.shift_windows:
        shift = params.stl.window_size // 2
        out = ad.roll_hw(out, shift, shift)
    if params.outer_residual:
        out = ad.add(out, inputs)
    return out


def residual_cnn_forward(x, params):
    """CNN ablation regularizer with the same input/output contract."""
    h = ad.gelu(ad.conv2d_same(x, params.conv1_kernel, params.conv1_bias))
    h = ad.gelu(ad.conv2d_same(h, params.conv2_kernel, params.conv2_bias))
    out = ad.conv2d_same(h, params.conv3_kernel, params.conv3_bias)
    if params.outer_residual:
        out = ad.add(out, x)
    return out


def regularizer_forward(x, params):
    if params.kind == "rstr":
        return rstr_forward(x, params)
    if params.kind == "cnn":
        return residual_cnn_forward(x, params)
    raise ValueError(f"unknown regularizer kind {params.kind!r}")


# ---------------------------------------------------------------------------
# checkpointing


def save_regularizer(path, params):
    """Write parameters to the bit-exact RSTR checkpoint container."""
    records = [(name, tensor.data) for name, tensor in params.named_parameters()]
    import json

    config = json.dumps(params.config_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(config)))
        fh.write(config)
        from .formats import write_named_arrays

        write_named_arrays(fh, records)


def _rebuild_from_records(config, records):
    values = dict(records)

    def take(name):
        return _param(values[name])

    if config["kind"] == "rstr":
        stl = STLParams(
            embed_dim=int(config["embed_dim"]),
            n_heads=int(config["n_heads"]),
            window_size=int(config["window_size"]),
            mlp_ratio=int(config["mlp_ratio"]),
            w_q=take("stl.w_q"), b_q=take("stl.b_q"),
            w_k=take("stl.w_k"), b_k=take("stl.b_k"),
            w_v=take("stl.w_v"), b_v=take("stl.b_v"),
            w_o=take("stl.w_o"), b_o=take("stl.b_o"),
            ln1_gamma=take("stl.ln1_gamma"), ln1_beta=take("stl.ln1_beta"),
            ln2_gamma=take("stl.ln2_gamma"), ln2_beta=take("stl.ln2_beta"),
            mlp_w1=take("stl.mlp_w1"), mlp_b1=take("stl.mlp_b1"),
            mlp_w2=take("stl.mlp_w2"), mlp_b2=take("stl.mlp_b2"),
        )
        return RSTRParams(
            conv_in_kernel=take("conv_in_kernel"),
            conv_in_bias=take("conv_in_bias"),
            stl=stl,
            conv_out_kernel=take("conv_out_kernel"),
            conv_out_bias=take("conv_out_bias"),
            outer_residual=bool(config["outer_residual"]),
            shift_windows=bool(config["shift_windows"]),
        )
    if config["kind"] == "cnn":
        return ResidualCNNParams(
            conv1_kernel=take("conv1_kernel"), conv1_bias=take("conv1_bias"),
            conv2_kernel=take("conv2_kernel"), conv2_bias=take("conv2_bias"),
            conv3_kernel=take("conv3_kernel"), conv3_bias=take("conv3_bias"),
            outer_residual=bool(config["outer_residual"]),
        )
    raise ValueError(f"unknown regularizer kind {config['kind']!r}")


def load_regularizer(path):
    import json

    from .formats import read_named_arrays

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a regularizer checkpoint: magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<Q", fh.read(8))
        config = json.loads(fh.read(config_len).decode("utf-8"))
        records = read_named_arrays(fh)
    return _rebuild_from_records(config, records)
