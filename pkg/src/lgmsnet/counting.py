"""Analytic parameter and FLOP accounting.

Counts are enumerated from the configuration alone, layer by layer; they do
not look at a built :class:`~lgmsnet.model.ParamStore`, so agreement between
the two is a real check.

FLOP convention: 2 FLOPs per multiply-accumulate for convolutions, linear
maps and the two attention matmuls (QK^T and AV). A layer with bias adds one
FLOP per output element. Normalization, activations, softmax, residual adds,
pooling and resampling are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig

REFERENCE_PARAMS = 2.32e6
REFERENCE_GFLOPS = 4.89


@dataclass
class CountReport:
    total_params: int
    total_flops: int
    breakdown: list[tuple[str, int, int]] = field(default_factory=list)
    resolution: tuple[int, int] = (256, 256)

    def to_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_gflops": self.total_flops / 1e9,
            "blocks": [{"name": n, "params": p, "flops": f} for n, p, f in self.breakdown],
        }


def conv_counts(c_in: int, c_out: int, k: int, hw: int, groups: int = 1, bias: bool = True) -> tuple[int, int]:
    macs = hw * c_out * (c_in // groups) * k * k
    params = c_out * (c_in // groups) * k * k + (c_out if bias else 0)
    return params, 2 * macs + (hw * c_out if bias else 0)


def linear_counts(d_in: int, d_out: int, tokens: int, bias: bool = True) -> tuple[int, int]:
    params = d_in * d_out + (d_out if bias else 0)
    return params, 2 * tokens * d_in * d_out + (tokens * d_out if bias else 0)


def norm_params(c: int) -> int:
    return 2 * c


def _sum(*pairs):
    return sum(p for p, _ in pairs), sum(f for _, f in pairs)


def lms_counts(c: int, kernels, hw: int):
    q = c // 4
    parts = [conv_counts(q, q, k, hw, groups=q, bias=False) for k in kernels]
    parts.append((norm_params(c), 0))
    parts.append(conv_counts(c, q, 1, hw, bias=False))
    parts.append((norm_params(q), 0))
    parts.append(conv_counts(q, c, 3, hw))
    return _sum(*parts)


def transformer_counts(d: int, tokens: int, heads: int, mlp_ratio: float, depth: int):
    m = int(round(mlp_ratio * d))
    dh = d // heads
    per_layer = [
        (norm_params(d), 0),
        linear_counts(d, 3 * d, tokens),
        (0, 2 * heads * tokens * tokens * dh),  # QK^T
        (0, 2 * heads * tokens * tokens * dh),  # AV
        linear_counts(d, d, tokens),
        (norm_params(d), 0),
        linear_counts(d, m, tokens),
        linear_counts(m, d, tokens),
    ]
    p, f = _sum(*per_layer)
    return p * depth, f * depth


def gms_counts(c: int, cfg: ModelConfig, h: int, w: int):
    hw = h * w
    e = cfg.gms_expansion * c
    t, cc = cfg.tc_ratio
    xt = e * t // (t + cc)
    xc = e - xt
    p = cfg.patch_size
    parts = [conv_counts(c, c, 3, hw), conv_counts(c, e, 1, hw)]
    if xc:
        parts.append(conv_counts(xc, xc, 3, hw, groups=xc))
    if xt:
        a = cfg.attention
        parts.append(transformer_counts(xt * p * p, hw // (p * p), a.num_heads, a.mlp_ratio, a.depth))
    parts.append(conv_counts(e, c, 1, hw))
    parts.append(conv_counts(2 * c, c, 3, hw))
    return _sum(*parts)


def transition_counts(c_in: int, c_out: int, hw: int):
    return _sum(conv_counts(c_in, c_out, 3, hw, bias=False), (norm_params(c_out), 0))


def fusion_counts(c: int, width: int, hw: int):
    return _sum(
        conv_counts(c, c, 3, hw, groups=2, bias=False),
        (norm_params(c), 0),
        conv_counts(c, width, 1, hw, bias=False),
        (norm_params(width), 0),
    )


def count_params_flops(cfg: ModelConfig, resolution: tuple[int, int] = (256, 256)) -> CountReport:
    cfg.validate()
    sc = cfg.stage_channels
    H, W = resolution
    rows = []

    def stage_block(name, s, c):
        h, w = H >> (s - 1), W >> (s - 1)
        if s in cfg.gms_stages:
            rows.append((name, *gms_counts(c, cfg, h, w)))
        else:
            rows.append((name, *lms_counts(c, cfg.lms_kernels, h * w)))

    prev = cfg.input_channels
    for s in range(1, 6):
        hw = (H >> (s - 1)) * (W >> (s - 1))
        rows.append((f"enc{s}.trans", *transition_counts(prev, sc[s - 1], hw)))
        stage_block(f"enc{s}.block", s, sc[s - 1])
        prev = sc[s - 1]
    for d in range(4, 0, -1):
        hw = (H >> (d - 1)) * (W >> (d - 1))
        c = sc[d - 1]
        rows.append((f"dec{d}.trans", *transition_counts(sc[d], c, hw)))
        rows.append((f"dec{d}.fuse", *fusion_counts(2 * c, c, hw)))
        stage_block(f"dec{d}.block", d, c)
    rows.append(("head", *conv_counts(sc[0], cfg.num_classes, 1, H * W)))
    return CountReport(
        total_params=sum(r[1] for r in rows),
        total_flops=sum(r[2] for r in rows),
        breakdown=rows,
        resolution=(H, W),
    )
