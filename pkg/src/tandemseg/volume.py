"""Volume containers, the SEGV1 file format, and slice-level preprocessing.

SEGV1 layout: magic ``SEGV1`` (5 bytes), dtype code u8 (0 = float32 image,
1 = uint8 labels), dims as 3 u32 LE (D, H, W), spacing as 3 f32 LE in mm,
then the raw little-endian payload in z-major order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from ._binio import ByteReader
from .errors import DimensionError, FormatError, ValidationError

MAGIC = b"SEGV1"
DTYPE_IMAGE = 0
DTYPE_LABELS = 1


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise ValidationError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


@dataclass
class Volume:
    """A (D, H, W) float32 image volume with per-axis voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        if not np.isfinite(self.data).all():
            raise ValidationError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SegVolume:
    """A (D, H, W) uint8 label volume: 0 background, 1 liver, 2 lesion."""

    labels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise DimensionError(f"label data must be 3-D, got shape {self.labels.shape}")
        self.spacing = _check_spacing(self.spacing)
        bad = self.labels.max(initial=0)
        if bad > 2:
            raise ValidationError(f"label out of range: found {bad}, allowed values are 0, 1, 2")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def liver_mask(self) -> np.ndarray:
        """Lesion voxels count as liver: mask = labels >= 1."""
        return self.labels >= 1

    def lesion_mask(self) -> np.ndarray:
        return self.labels == 2


def write_volume(v: Union[Volume, SegVolume], path: str) -> None:
    if isinstance(v, Volume):
        code, payload = DTYPE_IMAGE, v.data.astype("<f4", copy=False)
        dims = v.dims
    elif isinstance(v, SegVolume):
        code, payload = DTYPE_LABELS, v.labels
        dims = v.dims
    else:
        raise ValidationError(f"write_volume expects Volume or SegVolume, got {type(v).__name__}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", code))
        fh.write(struct.pack("<III", *dims))
        fh.write(struct.pack("<fff", *v.spacing))
        fh.write(payload.tobytes(order="C"))


def read_volume(path: str) -> Union[Volume, SegVolume]:
    with open(path, "rb") as fh:
        reader = ByteReader(fh.read(), source=path)
    reader.expect_magic(MAGIC, "volume")
    code = reader.u8("dtype code")
    if code not in (DTYPE_IMAGE, DTYPE_LABELS):
        raise FormatError(f"{path}: unknown dtype code {code} at offset 5")
    dims = tuple(reader.u32("extent") for _ in range(3))
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero extent in dims {dims} at offset 6")
    spacing = tuple(reader.f32("spacing") for _ in range(3))
    count = dims[0] * dims[1] * dims[2]
    itemsize = 4 if code == DTYPE_IMAGE else 1
    raw = reader.take(count * itemsize, "payload")
    reader.expect_end("payload")
    if code == DTYPE_IMAGE:
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        return Volume(data=data, spacing=spacing)
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(dims).copy()
    return SegVolume(labels=labels, spacing=spacing)


def scale_intensities(v):
    """Divide by 255 and clamp to [-2, 2]. Accepts a Volume or a bare array."""
    if isinstance(v, Volume):
        return Volume(data=scale_intensities(v.data), spacing=v.spacing)
    arr = np.asarray(v, dtype=np.float32)
    return np.clip(arr / np.float32(255.0), -2.0, 2.0)


def slices_with_liver(seg: SegVolume) -> list[int]:
    """Ascending z-indices of axial slices containing any liver or lesion voxel."""
    present = (seg.labels >= 1).any(axis=(1, 2))
    return [int(z) for z in np.flatnonzero(present)]


def downscale_slice(sl: np.ndarray) -> np.ndarray:
    """Halve a 2-D slice: mean pooling for images, foreground-favouring
    majority vote for integer label slices (ties go to the higher label,
    background only wins an all-background tile)."""
    sl = np.asarray(sl)
    if sl.ndim != 2:
        raise DimensionError(f"downscale_slice expects a 2-D slice, got shape {sl.shape}")
    h, w = sl.shape
    if h % 2 or w % 2:
        raise DimensionError(f"downscale_slice requires even extents, got {h}x{w}")
    tiles = sl.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    if np.issubdtype(sl.dtype, np.integer):
        c1 = (tiles == 1).sum(axis=-1)
        c2 = (tiles == 2).sum(axis=-1)
        out = np.zeros((h // 2, w // 2), dtype=sl.dtype)
        out[c1 > 0] = 1
        out[(c2 > 0) & (c2 >= c1)] = 2
        return out
    return tiles.mean(axis=-1).astype(sl.dtype, copy=False)
