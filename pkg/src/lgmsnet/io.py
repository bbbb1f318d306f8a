"""On-disk formats: LGTS tensors, LGCK checkpoints, PGM/PPM images.

LGTS layout (all integers little-endian)::

    b"LGTS" | u8 version=1 | u8 dtype (1=float32, 2=float64) | u8 rank
    | rank x u32 extents | row-major payload

LGCK layout::

    b"LGCK" | u8 version=1 | u32 entry count
    | per entry: u16 name length, utf-8 name, LGTS blob
"""
from __future__ import annotations

import io as _io
import os
import struct
from typing import BinaryIO, Iterable

import numpy as np
from PIL import Image

from .tensor import Tensor

LGTS_MAGIC = b"LGTS"
LGCK_MAGIC = b"LGCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = LGTS_MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    return header + payload


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated stream")
    return buf


def read_tensor_from(f: BinaryIO) -> Tensor:
    if _read_exact(f, 4) != LGTS_MAGIC:
        raise FormatError("bad LGTS magic")
    version, code, rank = struct.unpack("<BBB", _read_exact(f, 3))
    if version != VERSION:
        raise FormatError(f"unsupported LGTS version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype)
    return Tensor(data.astype(dtype.newbyteorder("="), copy=True).reshape(shape))


def decode_tensor(blob: bytes) -> Tensor:
    return read_tensor_from(_io.BytesIO(blob))


def save_tensor(path: str | os.PathLike, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor_from(f)


def save_checkpoint(path: str | os.PathLike, entries: Iterable[tuple[str, np.ndarray | Tensor]]) -> None:
    entries = list(entries)
    out = bytearray(LGCK_MAGIC + struct.pack("<BI", VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + encode_tensor(arr)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path: str | os.PathLike) -> list[tuple[str, Tensor]]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != LGCK_MAGIC:
            raise FormatError("bad LGCK magic")
        version, count = struct.unpack("<BI", _read_exact(f, 5))
        if version != VERSION:
            raise FormatError(f"unsupported LGCK version {version}")
        entries = []
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            entries.append((name, read_tensor_from(f)))
        if f.read(1):
            raise FormatError("trailing bytes after last checkpoint entry")
    return entries


# ---------------------------------------------------------------------------
# images


def write_image(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write (H, W) or (C, H, W) data in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        elif arr.shape[0] == 3:
            arr = np.transpose(arr, (1, 2, 0))
        else:
            raise FormatError(f"cannot write {arr.shape[0]} channels as PGM/PPM")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PPM")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PGM/PPM file into float32 (C, H, W) scaled to [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P") else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))
