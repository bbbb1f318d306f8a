"""Feature diagnostics: channel redundancy, foreground scale, fg/bg spectra."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .autograd import no_grad
from .model import ModelConfig, ParamStore, lgmsnet_forward
from .tensor import Tensor

JACOBI_TOL = 1e-10
JACOBI_SWEEPS = 100
DEFAULT_TAU = 0.01
DENSITY_BINS = 50
STAGES = ("enc1", "enc2", "enc3", "enc4", "enc5", "dec4", "dec3", "dec2", "dec1")


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def singular_values(m: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_SWEEPS) -> np.ndarray:
    """Singular values of ``m`` (descending) by one-sided Jacobi rotations.

    Works on the columns of the tall orientation, so a C x HW feature matrix
    costs O(C^2 HW) per sweep.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        a = a.T
    a = np.ascontiguousarray(a.T)  # rows of ``a`` are now the columns to orthogonalize
    n = a.shape[0]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = a[i] @ a[i]
                beta = a[j] @ a[j]
                gamma = a[i] @ a[j]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ai = a[i].copy()
                a[i] = c * ai - s * a[j]
                a[j] = s * ai + c * a[j]
        if not rotated:
            break
    return np.sort(np.sqrt(np.einsum("ij,ij->i", a, a)))[::-1]


# ---------------------------------------------------------------------------
# channel redundancy


def channel_redundancy(feature, tau: float = DEFAULT_TAU) -> int:
    """Number of singular values of the C x HW matrix above ``tau * sigma_1``.

    An all-zero map has no significant direction and counts 0.
    """
    f = _array(feature)
    if f.ndim != 3 or f.shape[0] < 1:
        raise ValueError(f"feature must be (C, H, W), got {f.shape}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    sv = singular_values(f.reshape(f.shape[0], -1))
    if sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > tau * sv[0]))


@dataclass
class RedundancyReport:
    layer: str
    tau: float
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.counts.values()))) if self.counts else 0.0

    def csv_rows(self) -> list[str]:
        return [f"{sid},{self.layer},{c}" for sid, c in sorted(self.counts.items())]


def redundancy_report(cfg: ModelConfig, store: ParamStore, samples, layer: str, tau: float = DEFAULT_TAU) -> RedundancyReport:
    if layer not in STAGES:
        raise ValueError(f"unknown layer {layer!r}; expected one of {', '.join(STAGES)}")
    rep = RedundancyReport(layer, tau)
    for s in sorted(samples, key=lambda s: s.id):
        rep.counts[s.id] = channel_redundancy(stage_activation(cfg, store, s.image, layer), tau)
    return rep


# ---------------------------------------------------------------------------
# foreground scale


@dataclass
class ScaleDensity:
    ratios: list[float]
    edges: np.ndarray
    counts: np.ndarray
    ids: list[str] = field(default_factory=list)

    def csv_rows(self) -> list[str]:
        ids = self.ids or [str(i) for i in range(len(self.ratios))]
        return [f"{sid},{r:.6f}" for sid, r in zip(ids, self.ratios)]


def fg_ratio(mask) -> float:
    m = _array(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return float(m.sum() / m.size)


def fg_scale_density(masks, ids=None, bins: int = DENSITY_BINS) -> ScaleDensity:
    """Foreground/total pixel ratio per mask and a uniform histogram on [0, 1]."""
    ratios = [fg_ratio(m) for m in masks]
    counts, edges = np.histogram(ratios, bins=bins, range=(0.0, 1.0))
    return ScaleDensity(ratios, edges, counts, list(ids) if ids is not None else [])


# ---------------------------------------------------------------------------
# foreground / background spectra


def downsample_nearest(mask, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of a (1, h, w) or (h, w) mask to ``size``."""
    m = _array(mask)
    if m.ndim == 3:
        m = m[0]
    h, w = m.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return m[np.ix_(rows, cols)] >= 0.5


def fg_bg_singular_ratio(feature, mask, normalize: bool = True) -> float:
    """Top singular value of the foreground columns over that of the background
    columns. With ``normalize`` each is first divided by sqrt(column count)."""
    f = _array(feature)
    if f.ndim != 3:
        raise ValueError(f"feature must be (C, H, W), got {f.shape}")
    sel = downsample_nearest(mask, f.shape[1:]).ravel()
    m = f.reshape(f.shape[0], -1)
    top = {}
    for region, cols in (("foreground", sel), ("background", ~sel)):
        k = int(cols.sum())
        if k == 0:
            raise ValueError(f"{region} region is empty at {f.shape[1]}x{f.shape[2]}")
        s = singular_values(m[:, cols])[0]
        top[region] = s / np.sqrt(k) if normalize else s
    if top["background"] == 0.0:
        raise ValueError("background region has an all-zero feature matrix")
    return float(top["foreground"] / top["background"])


# ---------------------------------------------------------------------------
# activations and export


def stage_activation(cfg: ModelConfig, store: ParamStore, image: np.ndarray, stage: str) -> np.ndarray:
    """(C, H, W) activation of one named stage for a single (C, H, W) image."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    x = Tensor(np.asarray(image, dtype=store[next(iter(store))].data.dtype)[None])
    with no_grad():
        _, feats = lgmsnet_forward(x, cfg, store, training=False, return_features=True)
    return feats[stage].data[0]


def export_features(cfg: ModelConfig, store: ParamStore, sample, stage: str, outdir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<id>.<stage>.lgts`` and a min-max scaled channel-mean PGM."""
    act = stage_activation(cfg, store, sample.image, stage)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    tpath = out / f"{sample.id}.{stage}.lgts"
    ipath = out / f"{sample.id}.{stage}.pgm"
    io.save_tensor(tpath, act)
    m = act.astype(np.float64).mean(axis=0)
    span = m.max() - m.min()
    io.write_image(ipath, (m - m.min()) / span if span > 0 else np.zeros_like(m))
    return tpath, ipath
