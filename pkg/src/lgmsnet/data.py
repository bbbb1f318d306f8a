"""Segmentation samples: synthetic generation, augmentation, disk I/O."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .nn import interp_matrix
from .tensor import Rng

RATIO_RANGE = (0.02, 0.6)
MIN_CONTRAST = 0.2


@dataclass
class SegSample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"bad sample shapes {self.image.shape}, {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError("image and mask extents differ")
        if not np.all(np.isfinite(self.image)):
            raise ValueError(f"sample {self.id}: non-finite image")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"sample {self.id}: mask is not binary")

    @property
    def fg_ratio(self) -> float:
        return float(self.mask.mean())


# ---------------------------------------------------------------------------
# synthetic data


def _render(size, centers, axes, angles, scale):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for (cy, cx), (a, b), t in zip(centers, axes, angles):
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        mask |= (u / (a * scale)) ** 2 + (v / (b * scale)) ** 2 <= 1.0
    return mask


def _blob_mask(gen, size, target):
    m = int(gen.integers(1, 4))
    centers = gen.uniform(0.25 * size, 0.75 * size, size=(m, 2))
    aspect = gen.uniform(0.5, 1.0, size=m)
    base = gen.uniform(0.6, 1.0, size=m) * size / 4
    axes = np.stack([base, base * aspect], axis=1)
    angles = gen.uniform(0, np.pi, size=m)
    lo, hi = 0.0, 8.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _render(size, centers, axes, angles, mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return _render(size, centers, axes, angles, hi)


def _smooth_field(gen, size, amplitude):
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(3):
        fy, fx = gen.uniform(0.5, 4.0, size=2)
        phase = gen.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return amplitude * field / 3


def _synth_one(gen, size, channels):
    while True:
        target = gen.uniform(*RATIO_RANGE)
        mask = _blob_mask(gen, size, target)
        ratio = mask.mean()
        if not RATIO_RANGE[0] <= ratio <= RATIO_RANGE[1]:
            continue
        bg = gen.uniform(0.15, 0.6)
        contrast = gen.uniform(0.28, 0.45)
        brighter = gen.random() < 0.5
        if bg + contrast > 0.92:
            brighter = False
        elif bg - contrast < 0.08:
            brighter = True
        fg = bg + contrast if brighter else bg - contrast
        tint = gen.uniform(0.85, 1.15, size=channels) if channels > 1 else np.ones(1)
        image = np.empty((channels, size, size))
        for c in range(channels):
            back = bg * tint[c] + _smooth_field(gen, size, 0.08) + gen.normal(0, 0.04, (size, size))
            front = fg * tint[c] + _smooth_field(gen, size, 0.04) + gen.normal(0, 0.04, (size, size))
            image[c] = np.where(mask, front, back)
        image = np.clip(image, 0.0, 1.0)
        gap = abs(image[:, mask].mean() - image[:, ~mask].mean())
        if gap >= MIN_CONTRAST:
            return image.astype(np.float32), mask[None].astype(np.float32)


def synth_dataset(n: int, size: int, rng: Rng | int, channels: int = 1) -> list[SegSample]:
    """``n`` samples of 1-3 filled ellipses over a textured noisy background.

    Foreground area ratios are drawn uniformly from [0.02, 0.6] and the
    foreground/background mean intensities differ by at least 0.2.
    """
    if size % 16:
        raise ValueError(f"size {size} must be divisible by 16")
    if not isinstance(rng, Rng):
        rng = Rng(int(rng))
    out = []
    for i in range(n):
        image, mask = _synth_one(rng.stream("synth", i), size, channels)
        out.append(SegSample(image, mask, f"synth{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# augmentation


def augment(sample: SegSample, gen: np.random.Generator) -> SegSample:
    """Random 90-degree rotation plus independent horizontal/vertical flips,
    applied identically to image and mask."""
    k = int(gen.integers(4))
    hflip = bool(gen.random() < 0.5)
    vflip = bool(gen.random() < 0.5)
    return apply_transform(sample, k, hflip, vflip)


def apply_transform(sample: SegSample, k: int, hflip: bool = False, vflip: bool = False) -> SegSample:
    h, w = sample.image.shape[1:]
    if k % 2 and h != w:
        raise ValueError(f"90/270 degree rotation needs a square sample, got {h}x{w}")

    def tf(a):
        a = np.rot90(a, k, axes=(1, 2))
        if hflip:
            a = a[:, :, ::-1]
        if vflip:
            a = a[:, ::-1, :]
        return np.ascontiguousarray(a)

    return SegSample(tf(sample.image), tf(sample.mask), sample.id)


# ---------------------------------------------------------------------------
# disk layout: <id>.img.pgm|ppm and <id>.mask.pgm


def save_dataset(samples, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        ext = "ppm" if s.image.shape[0] == 3 else "pgm"
        io.write_image(d / f"{s.id}.img.{ext}", s.image)
        io.write_image(d / f"{s.id}.mask.pgm", s.mask)


def resize_array(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (half-pixel) resampling of a (C, H, W) array to size x size."""
    if arr.shape[1:] == (size, size):
        return arr
    mh = interp_matrix(arr.shape[1], size)
    mw = interp_matrix(arr.shape[2], size)
    return (mh @ arr.astype(np.float64) @ mw.T).astype(np.float32)


def load_dataset(directory: str | os.PathLike, size: int | None = None) -> list[SegSample]:
    """Read every ``<id>.mask.pgm`` with its image, sorted by id. With
    ``size`` set, resample to size x size (masks re-binarized at 0.5)."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    samples = []
    for mask_path in sorted(d.glob("*.mask.pgm")):
        sid = mask_path.name[: -len(".mask.pgm")]
        img_path = next((p for p in (d / f"{sid}.img.pgm", d / f"{sid}.img.ppm") if p.exists()), None)
        if img_path is None:
            raise FileNotFoundError(f"no image for mask {mask_path.name}")
        image = io.read_image(img_path)
        mask = io.read_image(mask_path)[:1]
        if size is not None:
            image = np.clip(resize_array(image, size), 0, 1)
            mask = resize_array(mask, size)
        samples.append(SegSample(image, (mask >= 0.5).astype(np.float32), sid))
    if not samples:
        raise FileNotFoundError(f"no samples found in {d}")
    return samples


def split_samples(samples, val_fraction: float, rng: Rng | int):
    """Deterministic disjoint train/val split."""
    if not isinstance(rng, Rng):
        rng = Rng(int(rng))
    order = rng.stream("split").permutation(len(samples))
    n_val = max(1, int(round(val_fraction * len(samples))))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val
