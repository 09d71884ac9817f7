"""Synthetic abdominal phantoms: an ellipsoidal liver with spherical lesions.

Stand-in data source for desk-scale experiments; geometry is computed at
voxel centers in physical mm so anisotropic spacing behaves correctly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .volume import SegVolume, Volume


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 128, 128)
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0)
    liver_center_mm: tuple[float, float, float] | None = None  # default: volume center
    liver_semi_axes_mm: tuple[float, float, float] = (40.0, 45.0, 50.0)
    lesion_count: tuple[int, int] = (1, 3)  # inclusive range
    lesion_radius_mm: tuple[float, float] = (4.0, 10.0)
    background_intensity: float = 40.0
    liver_intensity: float = 120.0
    lesion_intensity: float = 210.0
    noise_sigma: float = 8.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.liver_center_mm is not None:
            self.liver_center_mm = tuple(float(c) for c in self.liver_center_mm)
        self.liver_semi_axes_mm = tuple(float(a) for a in self.liver_semi_axes_mm)
        self.lesion_count = tuple(int(c) for c in self.lesion_count)
        self.lesion_radius_mm = tuple(float(r) for r in self.lesion_radius_mm)

    def validate(self) -> None:
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ConfigError(f"dims must be 3 positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be 3 positive reals, got {self.spacing}")
        if any(a <= 0 for a in self.liver_semi_axes_mm):
            raise ConfigError(f"liver semi-axes must be positive, got {self.liver_semi_axes_mm}")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"lesion count range must satisfy 0 <= lo <= hi, got {self.lesion_count}")
        rmin, rmax = self.lesion_radius_mm
        if hi > 0:
            if rmin <= 0 or rmax < rmin:
                raise ConfigError(f"lesion radius range invalid: {self.lesion_radius_mm}")
            if rmax >= min(self.liver_semi_axes_mm):
                raise ConfigError(
                    f"max lesion radius {rmax} mm does not fit inside liver semi-axes "
                    f"{self.liver_semi_axes_mm}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    def center_mm(self) -> tuple[float, float, float]:
        if self.liver_center_mm is not None:
            return self.liver_center_mm
        return tuple(d * s / 2.0 for d, s in zip(self.dims, self.spacing))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls(**json.loads(text))


def _voxel_centers_mm(dims: Sequence[int], spacing: Sequence[float]):
    axes = [((np.arange(d) + 0.5) * s).astype(np.float64) for d, s in zip(dims, spacing)]
    return axes[0][:, None, None], axes[1][None, :, None], axes[2][None, None, :]


def gen_phantom(spec: PhantomSpec) -> tuple[Volume, SegVolume]:
    """Deterministically generate one (image, labels) pair from the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    zc, yc, xc = _voxel_centers_mm(spec.dims, spec.spacing)
    center = spec.center_mm()
    axes = spec.liver_semi_axes_mm

    liver = (((zc - center[0]) / axes[0]) ** 2
             + ((yc - center[1]) / axes[1]) ** 2
             + ((xc - center[2]) / axes[2]) ** 2) <= 1.0
    labels = np.where(liver, np.uint8(1), np.uint8(0))

    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        radius = float(rng.uniform(*spec.lesion_radius_mm))
        # A lesion center is accepted when the whole sphere provably fits in the
        # liver: scaled center norm <= 1 - r / min(semi-axis) is sufficient.
        budget = 1.0 - radius / min(axes)
        while True:
            p = np.array([rng.uniform(c - a, c + a) for c, a in zip(center, axes)])
            scaled = np.sqrt(sum(((p[i] - center[i]) / axes[i]) ** 2 for i in range(3)))
            if scaled <= budget:
                break
        lesion = ((zc - p[0]) ** 2 + (yc - p[1]) ** 2 + (xc - p[2]) ** 2) <= radius ** 2
        labels[lesion] = 2

    image = np.full(spec.dims, spec.background_intensity, dtype=np.float64)
    image[labels == 1] = spec.liver_intensity
    image[labels == 2] = spec.lesion_intensity
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=spec.dims)

    vol = Volume(data=image.astype(np.float32), spacing=spec.spacing)
    seg = SegVolume(labels=labels, spacing=spec.spacing)
    return vol, seg


def gen_phantom_batch(spec: PhantomSpec, count: int) -> list[tuple[Volume, SegVolume]]:
    """Generate ``count`` phantoms, one per consecutive seed starting at spec.seed."""
    return [gen_phantom(replace(spec, seed=spec.seed + i)) for i in range(count)]
