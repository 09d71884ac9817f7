"""Volume prediction: flip-averaged TTA, optional 3-slice context, ensembling.

Probabilities are averaged post-sigmoid. Slice work fans out over a thread
pool when ``jobs > 1``; results are accumulated in a fixed order so parallel
and sequential runs produce bit-identical volumes.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .architecture import TandemModel
from .errors import DimensionError, UsageError, ValidationError
from .volume import Volume, scale_intensities

# (flip_v, flip_h) pairs: identity, horizontal, vertical, both
ORIENTATIONS = ((False, False), (False, True), (True, False), (True, True))


@dataclass
class PredictionVolume:
    liver_prob: np.ndarray
    lesion_prob: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.liver_prob = np.ascontiguousarray(self.liver_prob, dtype=np.float32)
        self.lesion_prob = np.ascontiguousarray(self.lesion_prob, dtype=np.float32)
        if self.liver_prob.shape != self.lesion_prob.shape or self.liver_prob.ndim != 3:
            raise DimensionError(
                f"probability volumes must share a 3-D shape, got "
                f"{self.liver_prob.shape} vs {self.lesion_prob.shape}")
        for name, arr in (("liver_prob", self.liver_prob), ("lesion_prob", self.lesion_prob)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValidationError(f"{name} has values outside [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.liver_prob.shape


def _flip2d(a: np.ndarray, flip_v: bool, flip_h: bool) -> np.ndarray:
    if flip_v:
        a = a[::-1]
    if flip_h:
        a = a[:, ::-1]
    return a


def predict_slice_tta(model, img2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean prediction over the four flip orientations of one scaled slice.

    ``model`` only needs a ``predict_slice(img2d) -> (liver, lesion)`` method.
    """
    img2d = np.asarray(img2d)
    liver_acc = np.zeros(img2d.shape, dtype=np.float64)
    lesion_acc = np.zeros(img2d.shape, dtype=np.float64)
    for flip_v, flip_h in ORIENTATIONS:
        flipped = np.ascontiguousarray(_flip2d(img2d, flip_v, flip_h))
        liver, lesion = model.predict_slice(flipped)
        liver_acc += _flip2d(liver, flip_v, flip_h)
        lesion_acc += _flip2d(lesion, flip_v, flip_h)
    return ((liver_acc / 4.0).astype(np.float32),
            (lesion_acc / 4.0).astype(np.float32))


def _pad_to_multiple(data: np.ndarray, factor: int) -> tuple[np.ndarray, int, int]:
    d, h, w = data.shape
    ht = -(-h // factor) * factor
    wt = -(-w // factor) * factor
    if ht != h or wt != w:
        data = np.pad(data, ((0, 0), (0, ht - h), (0, wt - w)), mode="reflect")
    return data, h, w


def predict_volume(models, volume: Volume, context: bool = False,
                   jobs: int = 1) -> PredictionVolume:
    """TTA + (optional) context + equal-weight ensemble prediction of a volume.

    ``models`` may be a single TandemModel or a sequence (the ensemble).
    Intensity scaling is applied here; pass raw volumes.
    """
    if isinstance(models, TandemModel):
        models = [models]
    models = list(models)
    if not models:
        raise UsageError("predict_volume needs at least one model")
    if context and any(m.context is None for m in models):
        raise UsageError("context prediction requires models built with a context combiner")
    if jobs < 1:
        raise UsageError(f"jobs must be >= 1, got {jobs}")

    factor = 2 ** max(m.fcn1.depth for m in models)
    scaled = scale_intensities(volume.data)
    padded, h, w = _pad_to_multiple(scaled, factor)
    d = padded.shape[0]
    liver_acc = np.zeros(padded.shape, dtype=np.float64)
    lesion_acc = np.zeros(padded.shape, dtype=np.float64)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    mapper = pool.map if pool is not None else map
    try:
        for model in models:
            for flip_v, flip_h in ORIENTATIONS:
                slices = [np.ascontiguousarray(_flip2d(padded[z], flip_v, flip_h))
                          for z in range(d)]
                if context:
                    outs = list(mapper(model.slice_repr, slices))

                    def combine(z: int) -> np.ndarray:
                        zp, zn = max(z - 1, 0), min(z + 1, d - 1)
                        return model.combine_reprs(outs[zp][1], outs[z][1], outs[zn][1])

                    lesions = list(mapper(combine, range(d)))
                    livers = [o[0] for o in outs]
                else:
                    pairs = list(mapper(model.predict_slice, slices))
                    livers = [p[0] for p in pairs]
                    lesions = [p[1] for p in pairs]
                for z in range(d):
                    liver_acc[z] += _flip2d(livers[z], flip_v, flip_h)
                    lesion_acc[z] += _flip2d(lesions[z], flip_v, flip_h)
    finally:
        if pool is not None:
            pool.shutdown()

    scale = 1.0 / (4.0 * len(models))
    return PredictionVolume(
        liver_prob=(liver_acc * scale)[:, :h, :w].astype(np.float32),
        lesion_prob=(lesion_acc * scale)[:, :h, :w].astype(np.float32),
        spacing=volume.spacing)
