"""Reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a unique
``tag``; subclassing registers the backward rule. Applying a function to
tensors that require gradients records a :class:`Node` on the output. The
recorded nodes form the tape, which :func:`backward` walks in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Function",
    "GradGraph",
    "GradCheckReport",
    "MissingBackwardRule",
    "NonFiniteError",
    "backward",
    "gradcheck",
    "no_grad",
    "grad_enabled",
    "REGISTRY",
]

REGISTRY: dict[str, type["Function"]] = {}

_GRAD_ENABLED = True

# documented floor for the relative-error denominator
REL_ERR_FLOOR = 1e-8


class MissingBackwardRule(KeyError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Context:
    """Scratch space a forward pass uses to hand arrays to its backward."""

    __slots__ = ("saved", "attrs")

    def __init__(self):
        self.saved: tuple = ()
        self.attrs: dict[str, Any] = {}

    def save(self, *arrays):
        self.saved = arrays

    def __getattr__(self, name):
        try:
            return self.attrs[name]
        except KeyError:
            raise AttributeError(name) from None

    def __setattr__(self, name, value):
        if name in Context.__slots__:
            object.__setattr__(self, name, value)
        else:
            self.attrs[name] = value


class Node:
    __slots__ = ("tag", "inputs", "ctx")

    def __init__(self, tag, inputs, ctx):
        self.tag = tag
        self.inputs = inputs
        self.ctx = ctx


class Function:
    """Base class for differentiable operations.

    Subclasses define ``tag`` and two static methods::

        forward(ctx, *arrays, **kwargs) -> ndarray
        backward(ctx, grad) -> tuple of ndarray | None, one per input

    During backward ``ctx.needs_grad`` flags which inputs want a gradient.
    """

    tag: str = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if not cls.tag:
            raise TypeError(f"{cls.__name__} must define a tag")
        if cls.tag in REGISTRY:
            raise TypeError(f"duplicate op tag {cls.tag!r}")
        REGISTRY[cls.tag] = cls

    @staticmethod
    def forward(ctx, *arrays, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):  # pragma: no cover - abstract
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        from .tensor import Tensor

        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in inputs), **kwargs)
        track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=track)
        if track:
            ctx.needs_grad = tuple(t.requires_grad for t in inputs)
            result._node = Node(cls.tag, inputs, ctx)
        return result


@dataclass
class GradGraph:
    """Topologically ordered view of a recorded tape.

    ``nodes`` holds ``(tag, input ids, output id)`` triples with every node's
    inputs preceding it; ``leaves`` are ids of tensors that require gradients
    but were not produced by a recorded op.
    """

    nodes: list[tuple[str, tuple[int, ...], int]]
    leaves: list[int]
    tensors: dict[int, Any] = field(repr=False, default_factory=dict)

    @classmethod
    def trace(cls, output) -> "GradGraph":
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            node = t._node
            if node is not None:
                for parent in reversed(node.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        nodes = []
        leaves = []
        tensors = {}
        for t in order:
            tensors[id(t)] = t
            if t._node is None:
                leaves.append(id(t))
            else:
                nodes.append((t._node.tag, tuple(id(p) for p in t._node.inputs), id(t)))
        return cls(nodes, leaves, tensors)


def backward(output, wrt: Sequence | None = None, retain_graph: bool = False) -> dict:
    """Gradients of a scalar ``output`` with respect to leaf tensors.

    Returns a dict keyed by leaf tensor. When ``wrt`` is given, exactly those
    tensors are returned, and ones that do not participate get zeros.
    """
    from .tensor import Tensor

    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    graph = GradGraph.trace(output)
    for tag, _, _ in graph.nodes:
        if tag not in REGISTRY:
            raise MissingBackwardRule(tag)

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for tag, in_ids, out_id in reversed(graph.nodes):
        g = grads.pop(out_id, None)
        t = graph.tensors[out_id]
        if g is None:
            continue
        node = t._node
        in_grads = REGISTRY[tag].backward(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node.ctx = None
            t._node = None

    if wrt is None:
        wrt = [graph.tensors[i] for i in graph.leaves]
    result = {}
    for leaf in wrt:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf] = Tensor(np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape))
    return result


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    passed: bool
    step: float
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def _rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return np.abs(a - b) / denom


def gradcheck(
    f: Callable[..., Any],
    inputs: Iterable,
    step: float = 1e-5,
    tol: float = 1e-5,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    exclude: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare :func:`backward` against central finite differences.

    ``f`` maps the input tensors to a scalar tensor. Inputs must be float64
    tensors with ``requires_grad`` set; they are perturbed in place one
    coordinate at a time and restored. With ``max_coords`` set, at most that
    many coordinates per input are checked, chosen by a generator seeded
    with ``seed``. ``exclude`` maps an input name to flat coordinates that
    are never checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = list(inputs)
    for x in inputs:
        if x.data.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]

    pick = np.random.default_rng(seed)
    out = f(*inputs)
    analytic = backward(out, wrt=inputs)

    errors = {}
    for name, x in zip(names, inputs):
        ga = analytic[x].data.ravel()
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if exclude is not None and name in exclude:
            coords = np.setdiff1d(coords, exclude[name])
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(pick.choice(coords, size=max_coords, replace=False))
        ga = ga[coords]
        if not np.all(np.isfinite(ga)):
            bad = int(coords[np.flatnonzero(~np.isfinite(ga))[0]])
            raise NonFiniteError(f"{name}: non-finite gradient at coordinate {bad}")
        gf = np.empty_like(ga)
        with no_grad():
            for slot, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*inputs).data.sum())
                flat[i] = orig - step
                fm = float(f(*inputs).data.sum())
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"{name}: non-finite value at coordinate {i}")
                gf[slot] = (fp - fm) / (2 * step)
        errors[name] = float(_rel_err(ga, gf).max()) if ga.size else 0.0
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(errors, worst < tol, step, tol)
