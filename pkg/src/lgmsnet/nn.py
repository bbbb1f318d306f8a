"""Layer primitives: convolution, pooling, resampling, normalization,
activations, attention, and patch (un)folding.

All convolutions run at stride 1 with "same" zero padding of ``k // 2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Function
from .tensor import ShapeError, Tensor, add, matmul, mul, permute, reshape, split

__all__ = [
    "ConvSpec",
    "NormSpec",
    "AttentionSpec",
    "conv2d",
    "maxpool2x2",
    "upsample_bilinear_2x",
    "resize_bilinear",
    "standardize",
    "normalize",
    "group_norm",
    "layer_norm",
    "batch_norm",
    "silu",
    "sigmoid",
    "softmax",
    "linear",
    "unfold_patches",
    "fold_patches",
    "mhsa_block",
]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)


@dataclass(frozen=True)
class NormSpec:
    kind: str
    num_groups: int = 1
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in ("batch", "group", "layer"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kind == "group" and self.num_groups < 1:
            raise ValueError(f"num_groups must be positive, got {self.num_groups}")


@dataclass(frozen=True)
class AttentionSpec:
    embed_dim: int | None = None
    num_heads: int = 4
    mlp_ratio: float = 2.0
    depth: int = 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def check(self):
        if self.embed_dim is None or self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k, groups):
    """(N, C, H, W) -> (N, groups, C/groups * k * k, H * W) same-padded columns."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(n, groups, c // groups, h, w, k, k)
    return win.transpose(0, 1, 2, 5, 6, 3, 4).reshape(n, groups, (c // groups) * k * k, h * w)


def _conv_flat(x, w):
    """Dense same-padded conv without im2col.

    After padding and flattening each channel, every tap is a contiguous
    offset, so one GEMM over all taps followed by shifted sums suffices.
    Rows are computed at padded width and the pad columns dropped.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    wp = wd + 2 * p
    xp = np.pad(x, ((0, 0), (0, 0), (p, p + 1), (p, p))).reshape(n, c, -1)
    span = h * wp
    y = np.matmul(w.transpose(2, 3, 0, 1).reshape(k * k * o, c), xp)
    out = np.zeros((n, o, span), x.dtype)
    for i in range(k):
        for j in range(k):
            t = (i * k + j) * o
            off = i * wp + j
            out += y[:, t:t + o, off:off + span]
    return np.ascontiguousarray(out.reshape(n, o, h, wp)[..., :wd])


@lru_cache(maxsize=64)
def _band_index(k, wd):
    """Row/column positions of each tap in the banded row matrix, tap-major."""
    wp = wd + 2 * (k // 2)
    i, j, q = np.meshgrid(np.arange(k), np.arange(k), np.arange(wd), indexing="ij")
    return (i * wp + q + j).ravel(), q.ravel()


class _Banded:
    """Depthwise conv as one GEMM per channel against a banded matrix.

    Each output row is the k padded input rows above it, concatenated, times
    a (k * Wp, W) matrix holding the kernel along diagonals. Only k row
    copies are made instead of the k * k of im2col.
    """

    __slots__ = ("rows", "k", "shape")

    def __init__(self, x, k):
        n, c, h, wd = self.shape = x.shape
        p = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, k, axis=2)  # (n, c, h, Wp, k)
        self.rows = win.transpose(1, 0, 2, 4, 3).reshape(c, n * h, k * (wd + 2 * p))
        self.k = k

    def apply(self, w):
        n, c, h, wd = self.shape
        k = self.k
        r, q = _band_index(k, wd)
        band = np.zeros((c, self.rows.shape[2], wd), self.rows.dtype)
        band[:, r, q] = np.repeat(w.reshape(c, k * k), wd, axis=1)
        out = np.matmul(self.rows, band)  # (c, n*h, W)
        return np.ascontiguousarray(out.reshape(c, n, h, wd).transpose(1, 0, 2, 3))

    def weight_grad(self, g):
        n, c, h, wd = self.shape
        k = self.k
        gc = g.transpose(1, 0, 2, 3).reshape(c, n * h, wd)
        gband = np.matmul(self.rows.transpose(0, 2, 1), gc)
        r, q = _band_index(k, wd)
        return gband[:, r, q].reshape(c, k * k, wd).sum(axis=2).reshape(c, 1, k, k)


_FLAT_MIN_HW = 1024
_FLAT_MIN_C = 8


def _conv_forward(x, w, groups):
    """Grouped same-padded convolution; depthwise is the groups == C case.

    Returns the output and what the weight gradient needs: the column
    matrix, a ``_Banded`` for depthwise, None for pointwise, or False when
    the columns were skipped and must be rebuilt on demand.
    """
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    if k == 1 and groups == 1:
        out = np.matmul(w.reshape(o, c), x.reshape(n, c, h * wd))
        return out.reshape(n, o, h, wd), None
    if h * wd >= _FLAT_MIN_HW and cg >= _FLAT_MIN_C:
        if groups == 1:
            return _conv_flat(x, w), False
        og = o // groups
        parts = [_conv_flat(x[:, i * cg:(i + 1) * cg], w[i * og:(i + 1) * og]) for i in range(groups)]
        return np.concatenate(parts, axis=1), False
    if cg == 1 and o == groups == c:
        band = _Banded(x, k)
        return band.apply(w), band
    cols = _im2col(x, k, groups)
    if groups == 1:
        out = np.matmul(w.reshape(o, cg * k * k), cols[:, 0])
    else:
        out = np.matmul(w.reshape(groups, o // groups, cg * k * k), cols)  # (n, g, o/g, hw)
    return out.reshape(n, o, h, wd), cols


class Conv2d(Function):
    tag = "conv2d"

    @staticmethod
    def forward(ctx, x, w, *bias, groups):
        out, cols = _conv_forward(x, w, groups)
        if bias:
            out += bias[0][None, :, None, None]
        ctx.save(x, w, cols)
        ctx.groups = groups
        ctx.has_bias = bool(bias)
        return out

    @staticmethod
    def backward(ctx, g):
        x, w, cols = ctx.saved
        gs = ctx.groups
        n, c, h, wd = x.shape
        o, cg, k, _ = w.shape
        # grad wrt input is a same-padded conv with the group-transposed, flipped kernel
        gx = None
        if ctx.needs_grad[0]:
            wt = w.reshape(gs, o // gs, cg, k, k).transpose(0, 2, 1, 3, 4).reshape(c, o // gs, k, k)
            gx, _ = _conv_forward(g, np.ascontiguousarray(wt[:, :, ::-1, ::-1]), gs)
        if cols is False:
            cols = _im2col(x, k, gs)
        if isinstance(cols, _Banded):
            gw = cols.weight_grad(g)
        elif cols is None:
            gw = np.matmul(g.reshape(n, o, h * wd), x.reshape(n, c, h * wd).transpose(0, 2, 1))
            gw = gw.sum(axis=0).reshape(w.shape)
        else:
            gg = g.reshape(n, gs, o // gs, h * wd)
            gw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        grads = [gx, gw]
        if ctx.has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.has_bias != (bias is not None):
        raise ValueError("bias presence disagrees with spec.has_bias")
    args = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*args, groups=spec.groups)


# ---------------------------------------------------------------------------
# pooling and resampling


class MaxPool2x2(Function):
    """2x2/stride-2 max; ties route the gradient to the first maximum in
    row-major window order."""

    tag = "maxpool2x2"

    @staticmethod
    def forward(ctx, x):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        ctx.save(idx)
        ctx.shape = x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        (idx,) = ctx.saved
        n, c, h, w = ctx.shape
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)


def maxpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {x.shape}")
    return MaxPool2x2.apply(x)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (n_out, n_in) with half-pixel centres.

    Output index t samples source coordinate s = (t + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1].
    """
    t = np.arange(n_out)
    s = np.clip((t + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (t, i0), 1 - frac)
    np.add.at(m, (t, i1), frac)
    return m


class Resize(Function):
    tag = "resize_bilinear"

    @staticmethod
    def forward(ctx, x, size):
        mh = interp_matrix(x.shape[-2], size[0], x.dtype)
        mw = interp_matrix(x.shape[-1], size[1], x.dtype)
        ctx.save(mh, mw)
        return np.matmul(np.matmul(mh, x), mw.T)

    @staticmethod
    def backward(ctx, g):
        mh, mw = ctx.saved
        return (np.matmul(np.matmul(mh.T, g), mw),)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resampling of the last two axes to ``size``."""
    return Resize.apply(x, size=(int(size[0]), int(size[1])))


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    return resize_bilinear(x, (2 * x.shape[-2], 2 * x.shape[-1]))


# ---------------------------------------------------------------------------
# normalization


class Standardize(Function):
    """(x - mean) / sqrt(var + eps) over ``axes`` with biased variance."""

    tag = "standardize"

    @staticmethod
    def forward(ctx, x, axes, eps):
        y = x - x.mean(axis=axes, keepdims=True)
        sq = np.square(y)
        inv = 1.0 / np.sqrt(sq.mean(axis=axes, keepdims=True) + eps)
        y *= inv
        ctx.save(y, inv)
        ctx.axes = axes
        return y

    @staticmethod
    def backward(ctx, g):
        y, inv = ctx.saved
        axes = ctx.axes
        gm = g.mean(axis=axes, keepdims=True)
        out = np.multiply(g, y)
        gym = out.mean(axis=axes, keepdims=True)
        np.multiply(y, gym, out=out)
        np.subtract(g, out, out=out)
        out -= gm
        out *= inv
        return (out,)


def standardize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    axes = tuple(a % x.ndim for a in ((axes,) if isinstance(axes, int) else axes))
    return Standardize.apply(x, axes=axes, eps=eps)


def _affine(y: Tensor, scale: Tensor | None, shift: Tensor | None, channel_axis_shape) -> Tensor:
    if scale is not None:
        y = mul(y, reshape(scale, channel_axis_shape))
    if shift is not None:
        y = add(y, reshape(shift, channel_axis_shape))
    return y


def group_norm(x: Tensor, num_groups: int, scale=None, shift=None, eps: float = 1e-5) -> Tensor:
    n, c = x.shape[:2]
    if c % num_groups:
        raise ValueError(f"{c} channels are not divisible into {num_groups} groups")
    y = reshape(standardize(reshape(x, (n, num_groups, -1)), -1, eps), x.shape)
    return _affine(y, scale, shift, (c,) + (1,) * (x.ndim - 2))


def layer_norm(x: Tensor, scale=None, shift=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (token features)."""
    d = x.shape[-1]
    return _affine(standardize(x, -1, eps), scale, shift, (d,))


def batch_norm(
    x: Tensor,
    scale=None,
    shift=None,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of NCHW input.

    In training mode the batch statistics are used and the running buffers
    (if given) are updated in place; the running variance uses the unbiased
    estimate. In inference mode the running buffers are used.
    """
    c = x.shape[1]
    cshape = (c,) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        y = standardize(x, axes, eps)
        if running_mean is not None:
            data = x.data
            count = data.size // c
            bm = data.mean(axis=axes)
            bv = data.var(axis=axes) * (count / max(count - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * bm
            running_var *= 1 - momentum
            running_var += momentum * bv
    else:
        if running_mean is None or running_var is None:
            raise ValueError("inference-mode batch norm needs running statistics")
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        y = mul(add(x, Tensor((-running_mean).astype(x.dtype).reshape(cshape))), Tensor(inv.reshape(cshape)))
    return _affine(y, scale, shift, cshape)


def normalize(
    x: Tensor,
    spec: NormSpec,
    scale: Tensor | None = None,
    shift: Tensor | None = None,
    running: tuple[np.ndarray, np.ndarray] | None = None,
    training: bool = True,
) -> Tensor:
    if spec.kind == "group":
        return group_norm(x, spec.num_groups, scale, shift, spec.epsilon)
    if spec.kind == "layer":
        return layer_norm(x, scale, shift, spec.epsilon)
    rm, rv = running if running is not None else (None, None)
    return batch_norm(x, scale, shift, rm, rv, training, spec.momentum, spec.epsilon)


# ---------------------------------------------------------------------------
# activations


def logistic(x: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(-x)); exact in both tails, exp overflow just gives 0."""
    with np.errstate(over="ignore"):
        s = np.negative(x)
        np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    return s


class SiLU(Function):
    tag = "silu"

    @staticmethod
    def forward(ctx, x):
        s = logistic(x)
        ctx.save(x, s)
        return x * s

    @staticmethod
    def backward(ctx, g):
        x, s = ctx.saved
        return (g * s * (1 + x * (1 - s)),)


class Sigmoid(Function):
    tag = "sigmoid"

    @staticmethod
    def forward(ctx, x):
        s = logistic(x)
        ctx.save(s)
        return s

    @staticmethod
    def backward(ctx, g):
        (s,) = ctx.saved
        return (g * s * (1 - s),)


class Softmax(Function):
    tag = "softmax"

    @staticmethod
    def forward(ctx, x, axis):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y)
        ctx.axis = axis
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis % x.ndim)


# ---------------------------------------------------------------------------
# tokens and attention


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def unfold_patches(x: Tensor, p: int) -> Tensor:
    """(N, C, H, W) -> (N, H*W/p^2, C*p^2).

    Tokens are patches in row-major patch order; each token lists its
    elements ordered by (channel, row within patch, column within patch).
    """
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"spatial extent {(h, w)} not divisible by patch size {p}")
    y = reshape(x, (n, c, h // p, p, w // p, p))
    y = permute(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (n, (h // p) * (w // p), c * p * p))


def fold_patches(tokens: Tensor, p: int, channels: int, size: tuple[int, int]) -> Tensor:
    """Inverse of :func:`unfold_patches`."""
    n = tokens.shape[0]
    h, w = size
    y = reshape(tokens, (n, h // p, w // p, channels, p, p))
    y = permute(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (n, channels, h, w))


def attention(tokens: Tensor, spec: AttentionSpec, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """Multi-head self-attention (no residual, no norm)."""
    n, t, d = tokens.shape
    h, dh = spec.num_heads, spec.head_dim
    qkv = linear(tokens, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = permute(reshape(qkv, (n, t, 3, h, dh)), (2, 0, 3, 1, 4))  # (3, n, h, t, dh)
    q, k, v = (reshape(part, (n, h, t, dh)) for part in split(qkv, 0, [1, 1, 1]))
    scores = mul(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mixed = matmul(softmax(scores, -1), v)  # (n, h, t, dh)
    mixed = reshape(permute(mixed, (0, 2, 1, 3)), (n, t, d))
    return linear(mixed, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def mhsa_block(tokens: Tensor, spec: AttentionSpec, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """Stack of ``spec.depth`` pre-norm transformer layers.

    Each layer: ``x + attn(LN(x))`` then ``x + MLP(LN(x))`` with a two-layer
    SiLU MLP of width ``mlp_ratio * d``. No positional embedding. Parameter
    names under ``prefix``: ``layer{i}.{ln1,ln2}.{weight,bias}``,
    ``layer{i}.{qkv,proj,fc1,fc2}.{weight,bias}``.
    """
    if tokens.shape[-1] != spec.embed_dim:
        raise ShapeError(f"token dim {tokens.shape[-1]} != embed_dim {spec.embed_dim}")
    spec.check()
    x = tokens
    for i in range(spec.depth):
        lp = f"{prefix}layer{i}."
        a = layer_norm(x, params[lp + "ln1.weight"], params[lp + "ln1.bias"])
        x = add(x, attention(a, spec, params, lp))
        m = layer_norm(x, params[lp + "ln2.weight"], params[lp + "ln2.bias"])
        m = silu(linear(m, params[lp + "fc1.weight"], params[lp + "fc1.bias"]))
        x = add(x, linear(m, params[lp + "fc2.weight"], params[lp + "fc2.bias"]))
    return x


def mhsa_param_shapes(spec: AttentionSpec, prefix: str = "") -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter :func:`mhsa_block` reads."""
    d, m = spec.embed_dim, spec.hidden_dim
    out = []
    for i in range(spec.depth):
        lp = f"{prefix}layer{i}."
        out += [
            (lp + "ln1.weight", (d,), "ones"),
            (lp + "ln1.bias", (d,), "zeros"),
            (lp + "qkv.weight", (d, 3 * d), "fan_in"),
            (lp + "qkv.bias", (3 * d,), "zeros"),
            (lp + "proj.weight", (d, d), "fan_in"),
            (lp + "proj.bias", (d,), "zeros"),
            (lp + "ln2.weight", (d,), "ones"),
            (lp + "ln2.bias", (d,), "zeros"),
            (lp + "fc1.weight", (d, m), "fan_in"),
            (lp + "fc1.bias", (m,), "zeros"),
            (lp + "fc2.weight", (m, d), "fan_in"),
            (lp + "fc2.bias", (d,), "zeros"),
        ]
    return out
