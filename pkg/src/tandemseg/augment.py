"""Paired image/label augmentation: flips, rotation, zoom, elastic warp.

Every transform applies one spatial map to both rasters: the image is
resampled bilinearly (out-of-bounds filled with -2, the clipped intensity
minimum), labels by nearest neighbour (out-of-bounds 0). Decisions are
sampled once into ``AugmentParams`` so tests can force any combination.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, DimensionError

IMAGE_FILL = -2.0
LABEL_FILL = 0


@dataclass
class ElasticConfig:
    enabled: bool = True
    grid: int = 3
    displacement_sigma: float = 10.0  # px, std-dev of coarse grid displacements
    smoothing_sigma: float = 2.0      # px, Gaussian smoothing of the dense field

    def validate(self) -> None:
        if self.grid < 1:
            raise ConfigError(f"elastic grid extent must be >= 1, got {self.grid}")
        if self.displacement_sigma < 0 or self.smoothing_sigma < 0:
            raise ConfigError("elastic sigmas must be >= 0")

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "grid": self.grid,
                "displacement_sigma": self.displacement_sigma,
                "smoothing_sigma": self.smoothing_sigma}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ElasticConfig":
        return cls(**dict(d))


@dataclass
class AugmentConfig:
    flip_prob_h: float = 0.5
    flip_prob_v: float = 0.5
    max_rotation_deg: float = 15.0
    zoom_range: float = 0.10
    elastic: ElasticConfig = field(default_factory=ElasticConfig)

    def validate(self) -> None:
        for name, p in (("flip_prob_h", self.flip_prob_h), ("flip_prob_v", self.flip_prob_v)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.max_rotation_deg < 0:
            raise ConfigError(f"max_rotation_deg must be >= 0, got {self.max_rotation_deg}")
        if not 0.0 <= self.zoom_range < 1.0:
            raise ConfigError(f"zoom_range must lie in [0, 1), got {self.zoom_range}")
        self.elastic.validate()

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_prob_h=0.0, flip_prob_v=0.0, max_rotation_deg=0.0,
                   zoom_range=0.0, elastic=ElasticConfig(enabled=False))

    @classmethod
    def flips_only(cls) -> "AugmentConfig":
        return cls(max_rotation_deg=0.0, zoom_range=0.0,
                   elastic=ElasticConfig(enabled=False))

    def to_dict(self) -> dict:
        return {"flip_prob_h": self.flip_prob_h, "flip_prob_v": self.flip_prob_v,
                "max_rotation_deg": self.max_rotation_deg, "zoom_range": self.zoom_range,
                "elastic": self.elastic.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentConfig":
        d = dict(d)
        if "elastic" in d:
            d["elastic"] = ElasticConfig.from_dict(d["elastic"])
        return cls(**d)


@dataclass
class AugmentParams:
    """One sampled set of augmentation decisions (forcible in tests)."""

    flip_h: bool = False
    flip_v: bool = False
    rotation_deg: float = 0.0
    zoom: float = 1.0
    field: tuple[np.ndarray, np.ndarray] | None = None  # (dy, dx) dense displacements


def sample_params(config: AugmentConfig, shape: tuple[int, int],
                  rng: np.random.Generator) -> AugmentParams:
    config.validate()
    flip_h = bool(rng.random() < config.flip_prob_h)
    flip_v = bool(rng.random() < config.flip_prob_v)
    rotation = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    zoom = float(1.0 + rng.uniform(-config.zoom_range, config.zoom_range))
    fld = None
    if config.elastic.enabled and config.elastic.displacement_sigma > 0:
        fld = elastic_field(shape, config.elastic.grid, config.elastic.displacement_sigma,
                            config.elastic.smoothing_sigma, rng)
    return AugmentParams(flip_h=flip_h, flip_v=flip_v, rotation_deg=rotation,
                         zoom=zoom, field=fld)


def elastic_field(shape: tuple[int, int], grid: int, displacement_sigma: float,
                  smoothing_sigma: float, rng: np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Dense (dy, dx) displacement field from a corner-anchored coarse grid.

    Coarse displacements are N(0, displacement_sigma^2) per node, bilinearly
    upsampled to the full extent, then optionally Gaussian-smoothed (sigma in
    dense pixels).
    """
    h, w = shape
    coarse = rng.normal(0.0, displacement_sigma, size=(2, grid, grid))
    rows = np.linspace(0.0, grid - 1.0, h)
    cols = np.linspace(0.0, grid - 1.0, w)
    coords = np.meshgrid(rows, cols, indexing="ij")
    out = []
    for comp in coarse:
        dense = map_coordinates(comp, coords, order=1, mode="nearest")
        if smoothing_sigma > 0:
            dense = gaussian_filter(dense, smoothing_sigma)
        out.append(dense)
    return out[0], out[1]


def _snap_to_bounds(coords: np.ndarray, size: int, eps: float = 1e-6) -> np.ndarray:
    """Pull coordinates that rounding pushed a hair outside [0, size-1] back
    onto the border; genuinely out-of-bounds samples stay out-of-bounds."""
    coords = np.where((coords > -eps) & (coords < 0.0), 0.0, coords)
    return np.where((coords > size - 1) & (coords < size - 1 + eps),
                    float(size - 1), coords)


def _warp(image: np.ndarray, label: np.ndarray,
          src_y: np.ndarray, src_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    src_y = _snap_to_bounds(src_y, image.shape[0])
    src_x = _snap_to_bounds(src_x, image.shape[1])
    warped_img = map_coordinates(image.astype(np.float32), [src_y, src_x],
                                 order=1, mode="constant", cval=IMAGE_FILL)
    warped_lab = map_coordinates(label, [src_y, src_x],
                                 order=0, mode="constant", cval=LABEL_FILL)
    return warped_img, warped_lab


def apply_params(image: np.ndarray, label: np.ndarray,
                 params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image)
    label = np.asarray(label)
    if image.shape != label.shape or image.ndim != 2:
        raise DimensionError(
            f"image and label must be matching 2-D slices, got {image.shape} vs {label.shape}")
    if params.flip_h:
        image = image[:, ::-1]
        label = label[:, ::-1]
    if params.flip_v:
        image = image[::-1]
        label = label[::-1]
    if params.rotation_deg != 0.0 or params.zoom != 1.0:
        h, w = image.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        theta = np.deg2rad(params.rotation_deg)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        dy = (yy - cy) / params.zoom
        dx = (xx - cx) / params.zoom
        image, label = _warp(image, label,
                             cy + cos_t * dy + sin_t * dx,
                             cx - sin_t * dy + cos_t * dx)
    if params.field is not None:
        h, w = image.shape
        dy, dx = params.field
        if dy.shape != (h, w) or dx.shape != (h, w):
            raise DimensionError(
                f"elastic field shape {dy.shape} does not match slice {(h, w)}")
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        image, label = _warp(image, label, yy + dy, xx + dx)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def augment_pair(image: np.ndarray, label: np.ndarray, config: AugmentConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample one decision set and apply it to both rasters."""
    params = sample_params(config, np.asarray(image).shape, rng)
    return apply_params(image, label, params)


def elastic_deform(image: np.ndarray, label: np.ndarray, config: ElasticConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Warp both rasters through one random dense displacement field."""
    config.validate()
    if not config.enabled or config.displacement_sigma == 0:
        return image, label
    fld = elastic_field(np.asarray(image).shape, config.grid,
                        config.displacement_sigma, config.smoothing_sigma, rng)
    return apply_params(image, label, AugmentParams(field=fld))
