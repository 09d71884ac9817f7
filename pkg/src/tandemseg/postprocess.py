"""Probability volumes to final label masks.

Liver: threshold then keep the largest 3-D connected component. Lesion:
threshold, then crop to the liver mask dilated by a physical radius (exact
anisotropic Euclidean distances), which drops far-out false positives while
tolerating a slightly under-segmented liver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .inference import PredictionVolume
from .volume import SegVolume


@dataclass
class PostprocessConfig:
    threshold: float = 0.5
    liver_dilation_mm: float = 20.0
    connectivity: int = 6

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.liver_dilation_mm < 0:
            raise ConfigError(f"dilation radius must be >= 0, got {self.liver_dilation_mm}")
        if self.connectivity not in (6, 26):
            raise ConfigError(f"connectivity must be 6 or 26, got {self.connectivity}")


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ConfigError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component(mask: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """Boolean mask of the maximum-cardinality component (empty in → empty out).

    Equal-sized components tie-break to the first one in scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    labeled, count = ndimage.label(mask, structure=connectivity_structure(connectivity))
    sizes = np.bincount(labeled.ravel(), minlength=count + 1)
    sizes[0] = 0
    return labeled == sizes.argmax()


def dilate_mm(mask: np.ndarray, spacing, radius_mm: float) -> np.ndarray:
    """Voxels within ``radius_mm`` (anisotropic Euclidean, voxel centers) of the mask."""
    if radius_mm < 0:
        raise ConfigError(f"dilation radius must be >= 0, got {radius_mm}")
    mask = np.asarray(mask, dtype=bool)
    if radius_mm == 0 or not mask.any():
        return mask.copy()
    distance = ndimage.distance_transform_edt(~mask, sampling=tuple(float(s) for s in spacing))
    return distance <= radius_mm


def finalize(pred: PredictionVolume, config: PostprocessConfig | None = None) -> SegVolume:
    """Threshold, keep one liver component, crop lesions to the dilated liver."""
    config = config or PostprocessConfig()
    config.validate()
    liver = largest_component(pred.liver_prob >= config.threshold, config.connectivity)
    lesion = pred.lesion_prob >= config.threshold
    lesion &= dilate_mm(liver, pred.spacing, config.liver_dilation_mm)
    labels = np.zeros(pred.dims, dtype=np.uint8)
    labels[liver] = 1
    labels[lesion] = 2
    return SegVolume(labels=labels, spacing=pred.spacing)
