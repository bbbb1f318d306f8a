"""Dense tensor value type and the primitive operations built on it.

Tensors wrap a row-major numpy buffer of dtype float32 or float64. They are
treated as immutable: every operation returns a new tensor. Operations on
tensors that require gradients are recorded for :mod:`lgmsnet.autograd`.

Broadcasting follows the trailing-dimension rule only. Shapes are aligned
from the right; each aligned pair of extents must be equal or one of them 1;
a missing leading extent counts as 1.

======================  ============  ===========
a                       b             result
======================  ============  ===========
(N, C, H, W)            (C, 1, 1)     (N, C, H, W)
(N, T, d)               (d,)          (N, T, d)
(N, C, H, W)            (C,)          error unless C == W
(2, 3)                  (3, 2)        error
======================  ============  ===========

float32 matmul/conv accumulate in float32 through BLAS; float64 inputs
accumulate in float64.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Function

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "random_normal",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "split",
    "slice_axis",
    "tsum",
    "mean",
    "exp",
    "log",
]

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; all routes go through the recorded ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def tensor(data, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class Rng:
    """Seeded source of every random draw.

    Uses numpy's PCG64. Independent streams are derived per purpose by
    hashing the purpose label together with the seed, so e.g. augmentation
    draws never shift initialization draws.
    """

    seed: int
    algorithm: str = "PCG64"

    def stream(self, purpose: str, *index: int) -> np.random.Generator:
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode())]
        key.extend(int(i) for i in index)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def random_normal(rng, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> Tensor:
    """Normal draws. ``rng`` is an :class:`Rng` (default stream) or a Generator."""
    if std < 0:
        raise ValueError("std must be non-negative")
    gen = rng.stream("normal") if isinstance(rng, Rng) else rng
    draws = gen.standard_normal(tuple(shape))
    return Tensor((mean + std * draws).astype(dtype))


# ---------------------------------------------------------------------------
# elementwise


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
        out.append(max(x, y) if min(x, y) != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-rule broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Add(Function):
    tag = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    tag = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    tag = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


class Div(Function):
    tag = "div"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        gb = -g * a / (b * b)
        return unbroadcast(g / b, a.shape), unbroadcast(gb, b.shape)


class Maximum(Function):
    """Elementwise max; at ties the gradient goes to the first operand."""

    tag = "max"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a >= b)
        ctx.shapes = (a.shape, b.shape)
        return np.maximum(a, b)

    @staticmethod
    def backward(ctx, g):
        (first,) = ctx.saved
        sa, sb = ctx.shapes
        return unbroadcast(np.where(first, g, 0), sa), unbroadcast(np.where(first, 0, g), sb)


_ELEMENTWISE = {"add": Add, "sub": Sub, "mul": Mul, "div": Div, "max": Maximum}


def elementwise(op: str, a: Tensor, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    b = _as_tensor(b, a.dtype)
    broadcast_shape(a.shape, b.shape)
    return fn.apply(a, b)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def maximum(a, b):
    return elementwise("max", a, b)


class Exp(Function):
    tag = "exp"

    @staticmethod
    def forward(ctx, x):
        y = np.exp(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * y,)


class Log(Function):
    tag = "log"

    @staticmethod
    def forward(ctx, x):
        ctx.save(x)
        return np.log(x)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        return (g / x,)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    tag = "sum"

    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape = x.shape
        ctx.axis = _norm_axis(axis, x.ndim)
        ctx.keepdims = keepdims
        return np.asarray(x.sum(axis=ctx.axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    tag = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        if b.ndim == 2 and a.ndim > 2:
            # one large GEMM instead of a loop of small ones
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:])
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape)
            return ga, a.reshape(-1, a.shape[-1]).T @ g2
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast_batch(ga, a.shape), _unbroadcast_batch(gb, b.shape)


def _unbroadcast_batch(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape[:-2]) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        broadcast_shape(a.shape[:-2], b.shape[:-2])
    except ShapeError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# shape algebra


class Reshape(Function):
    tag = "reshape"

    @staticmethod
    def forward(ctx, x, shape):
        ctx.shape = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class Permute(Function):
    tag = "permute"

    @staticmethod
    def forward(ctx, x, axes):
        ctx.axes = axes
        return np.ascontiguousarray(np.transpose(x, axes))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(ctx.axes))),)


class Concat(Function):
    tag = "concat"

    @staticmethod
    def forward(ctx, *xs, axis):
        ctx.axis = axis
        ctx.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        bounds = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, bounds, axis=ctx.axis))


class SliceAxis(Function):
    tag = "slice"

    @staticmethod
    def forward(ctx, x, axis, start, stop):
        ctx.shape = x.shape
        ctx.axis = axis
        ctx.bounds = (start, stop)
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        return np.ascontiguousarray(x[tuple(index)])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        index = [slice(None)] * len(ctx.shape)
        index[ctx.axis] = slice(*ctx.bounds)
        out[tuple(index)] = g
        return (out,)


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or x.size % known:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return Reshape.apply(x, shape=shape)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(_check_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"{axes} is not a permutation of {x.ndim} axes")
    return Permute.apply(x, axes=axes)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    axis = _check_axis(axis, xs[0].ndim)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            x.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ref} vs {x.shape}")
    if len(xs) == 1:
        return xs[0]
    return Concat.apply(*xs, axis=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    return SliceAxis.apply(x, axis=axis, start=start, stop=stop)


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    axis = _check_axis(axis, x.ndim)
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not partition extent {x.shape[axis]}")
    out = []
    start = 0
    for s in sizes:
        out.append(slice_axis(x, axis, start, start + s))
        start += s
    return out
