"""LMS / GMS / fusion blocks and the LGMSNet encoder-decoder.

The network is written functionally: ``init_params`` builds a
:class:`ParamStore` and ``lgmsnet_forward`` reads parameters from it by
hierarchical name. Layout, with ``s`` an encoder stage 1..5 and ``d`` a
decoder level 4..1::

    enc{s}.trans   3x3 conv + BN + SiLU (channel transition)
    enc{s}.block   LMS, or GMS when s is in gms_stages
    dec{d}.trans   3x3 conv + BN + SiLU after 2x upsampling
    dec{d}.fuse    fusion of the skip and the decoder path
    dec{d}.block   same block type as enc{d}
    head           1x1 conv to num_classes logits
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import nn
from .nn import AttentionSpec, ConvSpec
from .tensor import Rng, Tensor, add, concat, split

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ParamStore",
    "init_params",
    "lms_block",
    "gms_block",
    "fusion_block",
    "lgmsnet_forward",
    "block_layout",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LMS_GN_GROUPS = 4


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 160)
    lms_kernels: tuple[int, ...] = (3, 5, 7, 9)
    tc_ratio: tuple[int, int] = (3, 1)
    patch_size: int = 2
    gms_expansion: int = 2
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    gms_stages: tuple[int, ...] = (4, 5)
    input_channels: int = 3
    num_classes: int = 1

    def __post_init__(self):
        # normalize list inputs (e.g. from JSON) to tuples
        for name in ("stage_channels", "lms_kernels", "tc_ratio", "gms_stages"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionSpec(**self.attention))

    # -- derived geometry

    def gms_split(self, channels: int) -> tuple[int, int, int]:
        """(expanded, transformer, conv) channel counts of a GMS block."""
        e = self.gms_expansion * channels
        t, c = self.tc_ratio
        xt = e * t // (t + c)
        return e, xt, e - xt

    def token_dim(self, channels: int) -> int:
        return self.gms_split(channels)[1] * self.patch_size**2

    def attention_for(self, channels: int) -> AttentionSpec:
        return replace(self.attention, embed_dim=self.token_dim(channels))

    @property
    def input_multiple(self) -> int:
        """H and W must be multiples of this."""
        m = 16
        for s in self.gms_stages:
            m = int(np.lcm(m, 2 ** (s - 1) * self.patch_size))
        return m

    def validate(self) -> "ModelConfig":
        sc = self.stage_channels
        if len(sc) != 5:
            raise ConfigError("stage_channels", f"need 5 stage widths, got {len(sc)}")
        for i, c in enumerate(sc):
            if c <= 0 or c % 4:
                raise ConfigError(f"stage_channels[{i}]", f"width {c} must be a positive multiple of 4")
        k = self.lms_kernels
        if len(k) != 4:
            raise ConfigError("lms_kernels", f"need 4 kernel sizes, got {len(k)}")
        if any(v < 1 or v % 2 == 0 for v in k):
            raise ConfigError("lms_kernels", f"kernel sizes must be odd, got {k}")
        if list(k) != sorted(k):
            raise ConfigError("lms_kernels", f"kernel sizes must be ascending, got {k}")
        if len(self.tc_ratio) != 2 or min(self.tc_ratio) < 0 or sum(self.tc_ratio) == 0:
            raise ConfigError("tc_ratio", f"need two non-negative parts, got {self.tc_ratio}")
        if self.patch_size < 1:
            raise ConfigError("patch_size", "must be positive")
        if self.gms_expansion < 1:
            raise ConfigError("gms_expansion", "must be positive")
        if any(s not in (1, 2, 3, 4, 5) for s in self.gms_stages):
            raise ConfigError("gms_stages", f"stages are numbered 1..5, got {self.gms_stages}")
        if self.input_channels < 1:
            raise ConfigError("input_channels", "must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes", "must be positive")
        a = self.attention
        if a.num_heads < 1 or a.depth < 0 or a.mlp_ratio <= 0:
            raise ConfigError("attention", f"invalid attention settings {a}")
        t, c = self.tc_ratio
        for s in self.gms_stages:
            width = sc[s - 1]
            e = self.gms_expansion * width
            if e % (t + c):
                raise ConfigError(
                    f"stage_channels[{s - 1}]",
                    f"expanded width {e} not divisible by tc_ratio sum {t + c}",
                )
            d = self.token_dim(width)
            if d and d % a.num_heads:
                raise ConfigError(
                    "attention.num_heads", f"token dim {d} at stage {s} not divisible by {a.num_heads} heads"
                )
        return self

    def check_input(self, shape: tuple[int, ...]):
        if len(shape) != 4:
            raise ValueError(f"expected NCHW input, got {shape}")
        if shape[1] != self.input_channels:
            raise ValueError(f"input has {shape[1]} channels, config expects {self.input_channels}")
        m = self.input_multiple
        if shape[2] % m or shape[3] % m:
            raise ValueError(f"spatial extent {shape[2:]} must be divisible by {m}")

    # -- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = {k: v for k, v in asdict(self.attention).items() if k != "embed_dim"}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        d = dict(d)
        if "attention" in d:
            att = dict(d["attention"])
            extra = set(att) - {"num_heads", "mlp_ratio", "depth", "embed_dim"}
            if extra:
                raise ConfigError(f"attention.{sorted(extra)[0]}", "unknown config field")
            att.pop("embed_dim", None)
            d["attention"] = AttentionSpec(**att)
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


class ParamStore:
    """Ordered, uniquely named learnable tensors plus non-learnable buffers
    (batch-norm running statistics). Only parameters count as elements."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray):
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def set(self, name: str, value: np.ndarray):
        """Replace a parameter's value, keeping its flag and dtype."""
        old = self._params[name]
        if value.shape != old.shape:
            raise ValueError(f"{name}: shape {value.shape} != {old.shape}")
        self._params[name] = Tensor(value.astype(old.dtype, copy=False), requires_grad=old.requires_grad)

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in construction order."""
        return [(n, t.data) for n, t in self._params.items()] + list(self.buffers.items())

    def load_state(self, entries):
        seen = set()
        for name, value in entries:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if name in self._params:
                self.set(name, arr)
            elif name in self.buffers:
                if arr.shape != self.buffers[name].shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {self.buffers[name].shape}")
                self.buffers[name] = arr.astype(self.buffers[name].dtype).copy()
            else:
                raise KeyError(f"checkpoint entry {name!r} does not belong to this model")
            seen.add(name)
        missing = (set(self._params) | set(self.buffers)) - seen
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[0]!r}")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self._params.items():
            other._params[n] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        other.buffers = {n: b.copy() for n, b in self.buffers.items()}
        return other

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore()
        for n, t in self._params.items():
            other._params[n] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        other.buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        return other


# ---------------------------------------------------------------------------
# parameter layout


def _conv_entries(name, spec: ConvSpec):
    out = [(f"{name}.weight", spec.weight_shape, "fan_in")]
    if spec.has_bias:
        out.append((f"{name}.bias", (spec.out_channels,), "zeros"))
    return out


def _bn_entries(name, c):
    return [(f"{name}.weight", (c,), "ones"), (f"{name}.bias", (c,), "zeros")]


def lms_specs(c: int, kernels) -> dict[str, ConvSpec]:
    q = c // 4
    specs = {f"dw{i}": ConvSpec(q, q, k, groups=q, has_bias=False) for i, k in enumerate(kernels)}
    specs["reduce"] = ConvSpec(c, q, 1, has_bias=False)
    specs["restore"] = ConvSpec(q, c, 3)
    return specs


def gms_specs(c: int, cfg: ModelConfig) -> dict[str, ConvSpec]:
    e, _, xc = cfg.gms_split(c)
    specs = {"local": ConvSpec(c, c, 3), "expand": ConvSpec(c, e, 1)}
    if xc:
        specs["dw"] = ConvSpec(xc, xc, 3, groups=xc)
    specs["fuse"] = ConvSpec(e, c, 1)
    specs["out"] = ConvSpec(2 * c, c, 3)
    return specs


def fusion_specs(c_enc: int, c_dec: int, width: int) -> dict[str, ConvSpec]:
    c = c_enc + c_dec
    return {"group": ConvSpec(c, c, 3, groups=2, has_bias=False), "point": ConvSpec(c, width, 1, has_bias=False)}


def lms_entries(name, c, kernels):
    s = lms_specs(c, kernels)
    out = []
    for i in range(4):
        out += _conv_entries(f"{name}.dw{i}", s[f"dw{i}"])
    out += _bn_entries(f"{name}.gn", c)
    out += _conv_entries(f"{name}.reduce", s["reduce"])
    out += _bn_entries(f"{name}.bn", c // 4)
    out += _conv_entries(f"{name}.restore", s["restore"])
    return out


def gms_entries(name, c, cfg: ModelConfig):
    s = gms_specs(c, cfg)
    out = _conv_entries(f"{name}.local", s["local"]) + _conv_entries(f"{name}.expand", s["expand"])
    if "dw" in s:
        out += _conv_entries(f"{name}.dw", s["dw"])
    if cfg.gms_split(c)[1]:
        out += nn.mhsa_param_shapes(cfg.attention_for(c), f"{name}.attn.")
    out += _conv_entries(f"{name}.fuse", s["fuse"]) + _conv_entries(f"{name}.out", s["out"])
    return out


def fusion_entries(name, c_enc, c_dec, width):
    s = fusion_specs(c_enc, c_dec, width)
    return (
        _conv_entries(f"{name}.group", s["group"])
        + _bn_entries(f"{name}.bn1", c_enc + c_dec)
        + _conv_entries(f"{name}.point", s["point"])
        + _bn_entries(f"{name}.bn2", width)
    )


def transition_entries(name, c_in, c_out):
    return _conv_entries(f"{name}.conv", ConvSpec(c_in, c_out, 3, has_bias=False)) + _bn_entries(f"{name}.bn", c_out)


def block_layout(cfg: ModelConfig) -> list[tuple[str, str, dict]]:
    """(block name, kind, geometry) in construction order."""
    sc = cfg.stage_channels
    out = []
    prev = cfg.input_channels
    for s in range(1, 6):
        w = sc[s - 1]
        out.append((f"enc{s}.trans", "transition", {"c_in": prev, "c_out": w, "stage": s}))
        kind = "gms" if s in cfg.gms_stages else "lms"
        out.append((f"enc{s}.block", kind, {"c": w, "stage": s}))
        prev = w
    for d in range(4, 0, -1):
        w = sc[d - 1]
        out.append((f"dec{d}.trans", "transition", {"c_in": sc[d], "c_out": w, "stage": d}))
        out.append((f"dec{d}.fuse", "fusion", {"c_enc": w, "c_dec": w, "width": w, "stage": d}))
        kind = "gms" if d in cfg.gms_stages else "lms"
        out.append((f"dec{d}.block", kind, {"c": w, "stage": d}))
    out.append(("head", "head", {"c_in": sc[0], "c_out": cfg.num_classes, "stage": 1}))
    return out


def block_entries(cfg: ModelConfig, name: str, kind: str, geo: dict):
    if kind == "transition":
        return transition_entries(name, geo["c_in"], geo["c_out"])
    if kind == "lms":
        return lms_entries(name, geo["c"], cfg.lms_kernels)
    if kind == "gms":
        return gms_entries(name, geo["c"], cfg)
    if kind == "fusion":
        return fusion_entries(name, geo["c_enc"], geo["c_dec"], geo["width"])
    if kind == "head":
        return _conv_entries(name, ConvSpec(geo["c_in"], geo["c_out"], 1))
    raise ValueError(kind)


def _bn_buffer_names(entries):
    # every ".bn*" affine pair has running statistics
    for name, shape, _ in entries:
        stem, leaf = name.rsplit(".", 1)
        last = stem.rsplit(".", 1)[-1]
        if leaf == "weight" and last.startswith("bn"):
            yield stem, shape


def _fan_in(shape) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def materialize(entries, store: ParamStore, gen: np.random.Generator, dtype=np.float32):
    for name, shape, kind in entries:
        if kind == "fan_in":
            value = gen.standard_normal(shape) * np.sqrt(2.0 / _fan_in(shape))
        elif kind == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(name, value.astype(dtype))
    for stem, shape in _bn_buffer_names(entries):
        store.add_buffer(f"{stem}.running_mean", np.zeros(shape, dtype=dtype))
        store.add_buffer(f"{stem}.running_var", np.ones(shape, dtype=dtype))


def init_params(cfg: ModelConfig, rng: Rng | int = 0, dtype=np.float32) -> ParamStore:
    """Fan-in scaled normal weights (std sqrt(2 / fan_in)), zero biases,
    unit/zero norm affines."""
    cfg.validate()
    if not isinstance(rng, Rng):
        rng = Rng(int(rng))
    gen = rng.stream("init")
    store = ParamStore()
    for name, kind, geo in block_layout(cfg):
        materialize(block_entries(cfg, name, kind, geo), store, gen, dtype)
    return store


# ---------------------------------------------------------------------------
# forward


def _conv(x, store, name, spec):
    b = store[f"{name}.bias"] if spec.has_bias else None
    return nn.conv2d(x, spec, store[f"{name}.weight"], b)


def _bn(x, store, name, training):
    running = (store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"])
    return nn.batch_norm(
        x, store[f"{name}.weight"], store[f"{name}.bias"], *running,
        training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
    )


def transition(x, store, name, c_out, training=True):
    spec = ConvSpec(x.shape[1], c_out, 3, has_bias=False)
    return nn.silu(_bn(_conv(x, store, f"{name}.conv", spec), store, f"{name}.bn", training))


def lms_block(x: Tensor, store: ParamStore, name: str, kernels=(3, 5, 7, 9), training: bool = True) -> Tensor:
    """Heterogeneous-kernel depthwise block; channel and spatial preserving."""
    c = x.shape[1]
    if c % 4:
        raise ValueError(f"LMS block needs channels divisible by 4, got {c}")
    specs = lms_specs(c, kernels)
    parts = split(x, 1, [c // 4] * 4)
    mixed = concat([_conv(p, store, f"{name}.dw{i}", specs[f"dw{i}"]) for i, p in enumerate(parts)], 1)
    y = nn.group_norm(mixed, LMS_GN_GROUPS, store[f"{name}.gn.weight"], store[f"{name}.gn.bias"])
    y = add(nn.silu(y), x)
    y = nn.silu(_bn(_conv(y, store, f"{name}.reduce", specs["reduce"]), store, f"{name}.bn", training))
    return _conv(y, store, f"{name}.restore", specs["restore"])


def gms_block(x: Tensor, store: ParamStore, name: str, cfg: ModelConfig) -> Tensor:
    """Hybrid transformer/conv block; channel and spatial preserving."""
    n, c, h, w = x.shape
    e, xt, xc = cfg.gms_split(c)
    p = cfg.patch_size
    if h % p or w % p:
        raise ValueError(f"GMS block input {h}x{w} not divisible by patch size {p}")
    specs = gms_specs(c, cfg)
    y = _conv(x, store, f"{name}.local", specs["local"])
    y = _conv(y, store, f"{name}.expand", specs["expand"])
    conv_part, trans_part = split(y, 1, [xc, xt])
    branches = []
    if xc:
        branches.append(_conv(conv_part, store, f"{name}.dw", specs["dw"]))
    if xt:
        tokens = nn.unfold_patches(trans_part, p)
        tokens = nn.mhsa_block(tokens, cfg.attention_for(c), store, f"{name}.attn.")
        branches.append(nn.fold_patches(tokens, p, xt, (h, w)))
    y = _conv(concat(branches, 1), store, f"{name}.fuse", specs["fuse"])
    return _conv(concat([y, x], 1), store, f"{name}.out", specs["out"])


def fusion_block(enc: Tensor, dec: Tensor, store: ParamStore, name: str, width: int, training: bool = True) -> Tensor:
    """Merge a skip feature with the decoder path: grouped 3x3 (one group per
    source) then pointwise 1x1, each followed by BN + SiLU."""
    if enc.shape[0] != dec.shape[0] or enc.shape[2:] != dec.shape[2:]:
        raise ValueError(f"fusion inputs disagree outside channels: {enc.shape} vs {dec.shape}")
    specs = fusion_specs(enc.shape[1], dec.shape[1], width)
    y = concat([enc, dec], 1)
    y = nn.silu(_bn(_conv(y, store, f"{name}.group", specs["group"]), store, f"{name}.bn1", training))
    return nn.silu(_bn(_conv(y, store, f"{name}.point", specs["point"]), store, f"{name}.bn2", training))


def _stage_block(x, store, name, kind, cfg, training):
    if kind == "gms":
        return gms_block(x, store, name, cfg)
    return lms_block(x, store, name, cfg.lms_kernels, training)


def lgmsnet_forward(
    x: Tensor,
    cfg: ModelConfig,
    store: ParamStore,
    training: bool = True,
    return_features: bool = False,
):
    """Logits (N, num_classes, H, W). With ``return_features`` also returns a
    dict of every encoder stage and decoder level output."""
    cfg.check_input(x.shape)
    sc = cfg.stage_channels
    feats = {}
    skips = []
    y = x
    for s in range(1, 6):
        if s > 1:
            y = nn.maxpool2x2(y)
        y = transition(y, store, f"enc{s}.trans", sc[s - 1], training)
        kind = "gms" if s in cfg.gms_stages else "lms"
        y = _stage_block(y, store, f"enc{s}.block", kind, cfg, training)
        feats[f"enc{s}"] = y
        skips.append(y)
    for d in range(4, 0, -1):
        w = sc[d - 1]
        y = nn.upsample_bilinear_2x(y)
        y = transition(y, store, f"dec{d}.trans", w, training)
        y = fusion_block(skips[d - 1], y, store, f"dec{d}.fuse", w, training)
        kind = "gms" if d in cfg.gms_stages else "lms"
        y = _stage_block(y, store, f"dec{d}.block", kind, cfg, training)
        feats[f"dec{d}"] = y
    logits = _conv(y, store, "head", ConvSpec(sc[0], cfg.num_classes, 1))
    return (logits, feats) if return_features else logits
