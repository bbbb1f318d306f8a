"""Finite-difference gradient checks for every differentiable op and for a
tiny full network, shared by the command line and the test suite."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .autograd import GradCheckReport, backward, gradcheck, no_grad
from .model import ModelConfig, init_params, lgmsnet_forward
from .nn import AttentionSpec, ConvSpec
from .tensor import (
    Rng,
    Tensor,
    add,
    concat,
    div,
    exp,
    log,
    matmul,
    maximum,
    mul,
    permute,
    reshape,
    slice_axis,
    sub,
    tsum,
)
from .train import bce_with_logits, dice_loss, seg_loss

OP_TOL = 1e-5
MODEL_TOL = 1e-4
STEP = 1e-5
TINY_GRADCHECK_CONFIG = ModelConfig(
    stage_channels=(4, 4, 8, 8, 8),
    input_channels=1,
    patch_size=1,  # stage 5 of a 16x16 input is 1x1
)


def _leaf(gen, shape, low=-1.0, high=1.0):
    return Tensor(gen.uniform(low, high, size=shape), requires_grad=True)


def _weighted(gen, fn):
    """Wrap ``fn`` so its output is reduced with fixed random weights. Signed
    weights keep the objective small, which keeps the finite-difference
    roundoff (about eps * |f| / h) well below the smallest gradients."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        if "w" not in cache:
            cache["w"] = Tensor(gen.uniform(-1.0, 1.0, size=out.shape))
        return tsum(mul(out, cache["w"]))

    return f


def _conv_case(gen, c_in, c_out, k, groups, bias):
    spec = ConvSpec(c_in, c_out, k, groups=groups, has_bias=bias)
    x = _leaf(gen, (2, c_in, 5, 6))
    w = _leaf(gen, spec.weight_shape)
    inputs = [x, w] + ([_leaf(gen, (c_out,))] if bias else [])
    return _weighted(gen, lambda x, w, *b: nn.conv2d(x, spec, w, b[0] if b else None)), inputs


def _attention_case(gen, block):
    # The key third of qkv.bias has an identically zero gradient (softmax is
    # shift invariant), so finite differences there only measure roundoff.
    # It is held constant here and asserted zero separately.
    spec = AttentionSpec(embed_dim=8, num_heads=2, mlp_ratio=2.0, depth=1)
    d = spec.embed_dim
    shapes = [
        (n, s) for n, s, _ in nn.mhsa_param_shapes(spec)
        if n != "layer0.qkv.bias" and (block or "qkv" in n or "proj" in n)
    ]
    names = [n for n, _ in shapes]
    params = [_leaf(gen, s, -0.5, 0.5) for _, s in shapes]
    bq, bv = _leaf(gen, (d,), -0.5, 0.5), _leaf(gen, (d,), -0.5, 0.5)
    bk = Tensor(gen.uniform(-0.5, 0.5, size=d))
    tokens = _leaf(gen, (2, 5, 8))

    def fn(t, q, v, *ps):
        table = dict(zip(names, ps))
        table["layer0.qkv.bias"] = concat([q, bk, v], 0)
        if block:
            return nn.mhsa_block(t, spec, table)
        return nn.attention(t, spec, table, "layer0.")

    return _weighted(gen, fn), [tokens, bq, bv] + params


def op_cases(seed: int) -> dict[str, Callable]:
    """name -> builder(gen) returning (scalar objective, float64 leaves)."""
    def binary(op, low=-1.0):
        return lambda g: (_weighted(g, op), [_leaf(g, (3, 4), low), _leaf(g, (4,), 0.5, 1.5)])

    def unary(op, low=-1.0, high=1.0, shape=(3, 4)):
        return lambda g: (_weighted(g, op), [_leaf(g, shape, low, high)])

    def binary_target(g, op):
        z = _leaf(g, (2, 1, 3, 3), -3, 3)
        y = Tensor((g.random((2, 1, 3, 3)) < 0.5).astype(np.float64))
        return (lambda z: op(z, y)), [z]

    def batch_norm_case(g):
        rm, rv = np.zeros(3), np.ones(3)
        x, s, b = _leaf(g, (2, 3, 3, 3)), _leaf(g, (3,)), _leaf(g, (3,))
        return _weighted(g, lambda x, s, b: nn.batch_norm(x, s, b, rm, rv, training=True)), [x, s, b]

    return {
        "add": binary(add),
        "sub": binary(sub),
        "mul": binary(mul),
        "div": binary(div),
        "maximum": binary(maximum),
        "exp": unary(exp),
        "log": unary(log, 0.5, 2.0),
        "sum": unary(lambda x: tsum(x, axis=1, keepdims=True)),
        "matmul": lambda g: (_weighted(g, matmul), [_leaf(g, (2, 3, 4)), _leaf(g, (4, 5))]),
        "matmul_batched": lambda g: (_weighted(g, matmul), [_leaf(g, (2, 3, 4)), _leaf(g, (2, 4, 2))]),
        "reshape": unary(lambda x: reshape(x, (2, 6))),
        "permute": unary(lambda x: permute(x, (2, 0, 1)), shape=(2, 3, 4)),
        "concat": lambda g: (_weighted(g, lambda a, b: concat([a, b], 1)), [_leaf(g, (2, 3)), _leaf(g, (2, 2))]),
        "slice": unary(lambda x: slice_axis(x, 1, 1, 3)),
        "conv2d": lambda g: _conv_case(g, 3, 4, 3, 1, True),
        "conv2d_grouped": lambda g: _conv_case(g, 4, 6, 3, 2, False),
        "conv2d_depthwise": lambda g: _conv_case(g, 4, 4, 5, 4, False),
        "conv2d_pointwise": lambda g: _conv_case(g, 3, 2, 1, 1, True),
        "maxpool2x2": unary(nn.maxpool2x2, shape=(2, 2, 4, 6)),
        "upsample_bilinear_2x": unary(nn.upsample_bilinear_2x, shape=(1, 2, 3, 4)),
        "resize_bilinear": unary(lambda x: nn.resize_bilinear(x, (5, 3)), shape=(1, 2, 3, 4)),
        "group_norm": lambda g: (
            _weighted(g, lambda x, s, b: nn.group_norm(x, 2, s, b)),
            [_leaf(g, (2, 4, 3, 3)), _leaf(g, (4,)), _leaf(g, (4,))],
        ),
        "layer_norm": lambda g: (
            _weighted(g, lambda x, s, b: nn.layer_norm(x, s, b)),
            [_leaf(g, (2, 3, 6)), _leaf(g, (6,)), _leaf(g, (6,))],
        ),
        "batch_norm": batch_norm_case,
        "silu": unary(nn.silu, -4, 4),
        "sigmoid": unary(nn.sigmoid, -4, 4),
        "softmax": unary(lambda x: nn.softmax(x, -1), -3, 3),
        "linear": lambda g: (
            _weighted(g, nn.linear),
            [_leaf(g, (2, 3, 4)), _leaf(g, (4, 5)), _leaf(g, (5,))],
        ),
        "unfold_patches": unary(lambda x: nn.unfold_patches(x, 2), shape=(1, 2, 4, 4)),
        "fold_patches": unary(lambda t: nn.fold_patches(t, 2, 2, (4, 4)), shape=(1, 4, 8)),
        "attention": lambda g: _attention_case(g, block=False),
        "mhsa_block": lambda g: _attention_case(g, block=True),
        "bce_with_logits": lambda g: binary_target(g, bce_with_logits),
        "dice_loss": lambda g: binary_target(g, lambda z, y: dice_loss(nn.sigmoid(z), y)),
        "seg_loss": lambda g: binary_target(g, seg_loss),
    }


def check_ops(seed: int = 0, only: list[str] | None = None) -> list[tuple[str, GradCheckReport]]:
    out = []
    for name, build in op_cases(seed).items():
        if only is not None and name not in only:
            continue
        gen = Rng(seed).stream("gradcheck", _tag(name))
        f, inputs = build(gen)
        out.append((name, gradcheck(f, inputs, step=STEP, tol=OP_TOL)))
    return out


def _tag(name: str) -> int:
    return sum(ord(c) * 31**i for i, c in enumerate(name)) % (2**31)


STRUCTURAL_ZERO = 1e-14
FD_NOISE_BOUND = 1e-9


@dataclass
class ModelCheck:
    """Outcome of the full-network check.

    ``report`` holds the relative-error comparison on coordinates with a
    nonzero analytic gradient. Coordinates whose analytic gradient is exactly
    zero (taps that never reach a 1x1 or 2x2 map, everything upstream of a
    single-element batch norm, the key bias) have no meaningful relative
    error; their finite differences are instead bounded in absolute value.
    """

    report: GradCheckReport
    structural_zeros: int
    structural_max_fd: float

    @property
    def passed(self) -> bool:
        return self.report.passed and self.structural_max_fd < FD_NOISE_BOUND


def check_model(
    seed: int = 0,
    cfg: ModelConfig = TINY_GRADCHECK_CONFIG,
    size: int = 16,
    max_coords: int | None = 2,
) -> ModelCheck:
    """seg_loss of the full network (float64, training mode) against central
    differences, over the input image and a seeded sample of every
    parameter tensor's coordinates.

    Every parameter is jittered away from its initial value first: at init
    the zero norm shifts feed exactly-zero tokens into the layer norms of a
    1x1 stage, a near-singular point where central differences are useless.
    """
    store = init_params(cfg, Rng(seed), dtype=np.float64)
    gen = Rng(seed).stream("gradcheck", _tag("model"))
    for _, p in store.trainable():
        p.data += gen.normal(0.0, 0.1, size=p.shape)
    x = Tensor(gen.uniform(0, 1, size=(1, cfg.input_channels, size, size)), requires_grad=True)
    y = Tensor((gen.random((1, cfg.num_classes, size, size)) < 0.5).astype(np.float64))
    names = ["input"] + [n for n, _ in store.trainable()]
    leaves = [x] + [store[n] for n in names[1:]]

    def f(*_):
        return seg_loss(lgmsnet_forward(x, cfg, store, training=True), y)

    grads = backward(f(), wrt=leaves)
    zeros = {n: np.flatnonzero(np.abs(grads[t].data.ravel()) < STRUCTURAL_ZERO) for n, t in zip(names, leaves)}
    report = gradcheck(
        f, leaves, step=STEP, tol=MODEL_TOL, names=names, max_coords=max_coords, seed=seed, exclude=zeros
    )

    # absolute check on a seeded sample of the structural zeros
    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    with no_grad():
        for n, t in zip(names, leaves):
            idx = zeros[n]
            if max_coords is not None and idx.size > max_coords:
                idx = pick.choice(idx, size=max_coords, replace=False)
            flat = t.data.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + STEP
                fp = f().item()
                flat[i] = orig - STEP
                fm = f().item()
                flat[i] = orig
                worst = max(worst, abs(fp - fm) / (2 * STEP))
    return ModelCheck(report, int(sum(z.size for z in zeros.values())), worst)
