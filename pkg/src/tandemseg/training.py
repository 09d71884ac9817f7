"""Dice loss, the two-stage training loop, and context-combiner training.

Stage 1 trains on half-resolution slices, stage 2 resumes the same
parameters at full resolution with a lower learning rate. Only slices
containing liver are used, volumes are split train/validation as whole
volumes, and the checkpoint with the lowest recorded validation loss wins
(ties to the earliest epoch).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .architecture import TandemModel
from .augment import AugmentConfig, augment_pair
from .errors import ConfigError, DimensionError, UsageError, ValidationError
from .optim import RmspropState, rmsprop_step
from .tensor import Tensor
from .volume import (SegVolume, Volume, downscale_slice, scale_intensities,
                     slices_with_liver)


@dataclass
class StageConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    resolution: str  # "half" | "full"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.resolution not in ("half", "full"):
            raise ConfigError(f"resolution must be 'half' or 'full', got {self.resolution!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageConfig":
        return cls(**dict(d))


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(200, 40, 1e-3, "half"))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(30, 10, 1e-4, "full"))
    context_stage: StageConfig = field(default_factory=lambda: StageConfig(20, 10, 1e-3, "full"))
    rho: float = 0.9
    rms_eps: float = 1e-8
    dice_smooth: float = 1.0
    squared_denominator: bool = False
    liver_weight: float = 0.5
    lesion_weight: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        self.stage1.validate()
        self.stage2.validate()
        self.context_stage.validate()
        if self.stage2.learning_rate >= self.stage1.learning_rate:
            raise ConfigError(
                f"fine-tuning learning rate {self.stage2.learning_rate} must be below "
                f"the stage-1 rate {self.stage1.learning_rate}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.dice_smooth <= 0:
            raise ConfigError(f"dice smoothing must be positive, got {self.dice_smooth}")
        if self.liver_weight < 0 or self.lesion_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        self.augment.validate()

    @classmethod
    def desk(cls, seed: int = 0) -> "TrainConfig":
        """Small-profile schedule for laptop-scale runs and tests."""
        return cls(stage1=StageConfig(20, 8, 1e-3, "half"),
                   stage2=StageConfig(6, 4, 1e-4, "full"),
                   context_stage=StageConfig(12, 8, 1e-3, "full"),
                   augment=AugmentConfig.flips_only(), seed=seed)

    def to_dict(self) -> dict:
        return {"stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict(),
                "context_stage": self.context_stage.to_dict(), "rho": self.rho,
                "rms_eps": self.rms_eps, "dice_smooth": self.dice_smooth,
                "squared_denominator": self.squared_denominator,
                "liver_weight": self.liver_weight, "lesion_weight": self.lesion_weight,
                "val_fraction": self.val_fraction, "seed": self.seed,
                "augment": self.augment.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        for key in ("stage1", "stage2", "context_stage"):
            if key in d:
                d[key] = StageConfig.from_dict(d[key])
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        return cls(**d)


def dice_loss(pred: Tensor, target, smooth: float = 1.0,
              squared_denominator: bool = False) -> Tensor:
    """1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), pooled over the whole batch."""
    if smooth <= 0:
        raise ConfigError(f"dice smoothing must be positive, got {smooth}")
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target)
    if tgt.shape != pred.shape:
        raise DimensionError(f"dice_loss target shape {tgt.shape} != pred shape {pred.shape}")
    if not np.isin(tgt, (0, 1)).all():
        raise ValidationError("dice_loss target must be binary (values in {0, 1})")
    g = Tensor(tgt.astype(pred.dtype, copy=False))
    intersection = (pred * g).sum()
    if squared_denominator:
        denom = (pred * pred).sum() + (g * g).sum()
    else:
        denom = pred.sum() + g.sum()
    return 1.0 - (2.0 * intersection + smooth) / (denom + smooth)


def total_loss(liver_prob: Tensor, lesion_prob: Tensor, seg_slice,
               liver_weight: float = 0.5, lesion_weight: float = 0.5,
               smooth: float = 1.0, squared_denominator: bool = False) -> Tensor:
    """Weighted sum of the liver and lesion Dice losses for a label batch."""
    labels = np.asarray(seg_slice)
    if labels.ndim == liver_prob.ndim - 1:
        labels = labels[:, None]
    if labels.shape != liver_prob.shape:
        raise DimensionError(
            f"label batch shape {labels.shape} does not match predictions {liver_prob.shape}")
    liver_mask = (labels >= 1).astype(np.float32)
    lesion_mask = (labels == 2).astype(np.float32)
    return (liver_weight * dice_loss(liver_prob, liver_mask, smooth, squared_denominator)
            + lesion_weight * dice_loss(lesion_prob, lesion_mask, smooth, squared_denominator))


@dataclass
class HistoryRow:
    epoch: int
    stage: int
    train_loss: float | None
    val_loss: float | None


@dataclass
class TrainCheckpoint:
    epoch: int
    stage: int
    val_loss: float | None
    arrays: "OrderedDict[str, np.ndarray]"
    arch_config: str


@dataclass
class TrainResult:
    history: list[HistoryRow]
    checkpoints: list[TrainCheckpoint]
    best_index: int | None
    train_volume_ids: list[int]
    val_volume_ids: list[int]
    gradient_volume_ids: list[int]

    @property
    def best(self) -> TrainCheckpoint | None:
        return None if self.best_index is None else self.checkpoints[self.best_index]


@dataclass
class _Sample:
    volume_id: int
    z: int
    image: np.ndarray
    labels: np.ndarray


def split_volumes(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic whole-volume train/validation split."""
    order = np.random.default_rng([seed, 17]).permutation(n)
    if n > 1 and val_fraction > 0:
        n_val = min(max(int(round(val_fraction * n)), 1), n - 1)
    else:
        n_val = 0
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val


def _prepare_samples(dataset: Sequence[tuple[Volume, SegVolume]],
                     volume_ids: Sequence[int], resolution: str) -> list[_Sample]:
    samples: list[_Sample] = []
    for vid in volume_ids:
        vol, seg = dataset[vid]
        if vol.dims != seg.dims:
            raise DimensionError(
                f"volume {vid}: image dims {vol.dims} != label dims {seg.dims}")
        scaled = scale_intensities(vol.data)
        for z in slices_with_liver(seg):
            img = scaled[z]
            lab = seg.labels[z]
            if resolution == "half":
                img = downscale_slice(img)
                lab = downscale_slice(lab)
            samples.append(_Sample(vid, z, np.ascontiguousarray(img),
                                   np.ascontiguousarray(lab)))
    return samples


class _DrawCounter:
    def __init__(self):
        self.value = 0

    def next(self) -> int:
        v = self.value
        self.value += 1
        return v


def _collate(samples: list[_Sample], indices, config: TrainConfig,
             counter: _DrawCounter, augment: bool) -> tuple[np.ndarray, np.ndarray]:
    imgs, labs = [], []
    for i in indices:
        s = samples[i]
        if augment:
            # per-sample stream: global seed XOR a monotone draw index
            rng = np.random.default_rng(config.seed ^ counter.next())
            img, lab = augment_pair(s.image, s.labels, config.augment, rng)
        else:
            img, lab = s.image, s.labels
        imgs.append(img)
        labs.append(lab)
    return np.stack(imgs).astype(np.float32)[:, None], np.stack(labs)


def _batch_loss(model: TandemModel, x: np.ndarray, labels: np.ndarray,
                config: TrainConfig, train: bool,
                rng: np.random.Generator | None) -> Tensor:
    liver, lesion, _, _ = model.forward(Tensor(x), train=train, rng=rng)
    return total_loss(liver, lesion, labels,
                      liver_weight=config.liver_weight,
                      lesion_weight=config.lesion_weight,
                      smooth=config.dice_smooth,
                      squared_denominator=config.squared_denominator)


def _validation_loss(model: TandemModel, samples: list[_Sample],
                     batch_size: int, config: TrainConfig) -> float | None:
    if not samples:
        return None
    losses = []
    counter = _DrawCounter()  # unused (no augmentation), keeps _collate's signature
    for start in range(0, len(samples), batch_size):
        idx = range(start, min(start + batch_size, len(samples)))
        x, labels = _collate(samples, idx, config, counter, augment=False)
        loss = _batch_loss(model, x, labels, config, train=False, rng=None)
        losses.append(loss.item())
    return float(np.mean(losses))


def _snapshot(model: TandemModel, epoch: int, stage: int,
              val_loss: float | None) -> TrainCheckpoint:
    arrays = OrderedDict((k, v.copy()) for k, v in model.state_arrays().items())
    return TrainCheckpoint(epoch=epoch, stage=stage, val_loss=val_loss,
                           arrays=arrays, arch_config=model.arch.to_json())


def _best_index(checkpoints: list[TrainCheckpoint]) -> int | None:
    scored = [(c.val_loss, i) for i, c in enumerate(checkpoints) if c.val_loss is not None]
    if scored:
        return min(scored)[1]
    return len(checkpoints) - 1 if checkpoints else None


def train(model: TandemModel, dataset: Sequence[tuple[Volume, SegVolume]],
          config: TrainConfig) -> TrainResult:
    """Run the two-stage schedule; returns history plus per-epoch checkpoints."""
    config.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")
    train_ids, val_ids = split_volumes(len(dataset), config.val_fraction, config.seed)
    params = model.parameters(include_context=False)
    dropout_rng = np.random.default_rng([config.seed, 23])
    counter = _DrawCounter()
    history: list[HistoryRow] = []
    checkpoints: list[TrainCheckpoint] = []
    gradient_vids: set[int] = set()
    global_epoch = 0
    for stage_num, stage in ((1, config.stage1), (2, config.stage2)):
        if stage.epochs == 0:
            continue
        train_samples = _prepare_samples(dataset, train_ids, stage.resolution)
        if not train_samples:
            raise ConfigError(
                "no liver-containing slices remain in the training volumes")
        val_samples = _prepare_samples(dataset, val_ids, stage.resolution)
        state = RmspropState.for_params(params, stage.learning_rate,
                                        config.rho, config.rms_eps)
        perm_rng = np.random.default_rng([config.seed, 31, stage_num])
        for _ in range(stage.epochs):
            order = perm_rng.permutation(len(train_samples))
            step_losses = []
            for start in range(0, len(order), stage.batch_size):
                idx = order[start:start + stage.batch_size]
                gradient_vids.update(train_samples[i].volume_id for i in idx)
                x, labels = _collate(train_samples, idx, config, counter, augment=True)
                loss = _batch_loss(model, x, labels, config, train=True, rng=dropout_rng)
                loss.assert_finite("training loss")
                loss.backward()
                rmsprop_step(params, None, state)
                for p in params:
                    p.zero_grad()
                step_losses.append(loss.item())
            val_loss = _validation_loss(model, val_samples, stage.batch_size, config)
            history.append(HistoryRow(global_epoch, stage_num,
                                      float(np.mean(step_losses)), val_loss))
            checkpoints.append(_snapshot(model, global_epoch, stage_num, val_loss))
            global_epoch += 1
    return TrainResult(history=history, checkpoints=checkpoints,
                       best_index=_best_index(checkpoints),
                       train_volume_ids=train_ids, val_volume_ids=val_ids,
                       gradient_volume_ids=sorted(gradient_vids))


# -- context-combiner training -------------------------------------------------


@dataclass
class _ContextSample:
    volume_id: int
    z: int
    reprs: tuple[np.ndarray, np.ndarray, np.ndarray]
    lesion_mask: np.ndarray


def _context_samples(model: TandemModel, dataset, volume_ids) -> list[_ContextSample]:
    samples: list[_ContextSample] = []
    for vid in volume_ids:
        vol, seg = dataset[vid]
        scaled = scale_intensities(vol.data)
        depth = vol.dims[0]
        liver_zs = slices_with_liver(seg)
        needed = sorted({min(max(z + dz, 0), depth - 1) for z in liver_zs for dz in (-1, 0, 1)})
        reprs = {z: model.slice_repr(scaled[z])[1] for z in needed}
        for z in liver_zs:
            triple = (reprs[max(z - 1, 0)], reprs[z], reprs[min(z + 1, depth - 1)])
            samples.append(_ContextSample(vid, z, triple,
                                          (seg.labels[z] == 2).astype(np.float32)))
    return samples


def train_context_combiner(model: TandemModel,
                           dataset: Sequence[tuple[Volume, SegVolume]],
                           config: TrainConfig) -> TrainResult:
    """Train only the 3-slice combiner on frozen-base representations."""
    config.validate()
    if model.context is None:
        raise UsageError("model was built without a context combiner; "
                         "enable context_enabled in the architecture config")
    if not dataset:
        raise ConfigError("training dataset is empty")
    train_ids, val_ids = split_volumes(len(dataset), config.val_fraction, config.seed)
    train_samples = _context_samples(model, dataset, train_ids)
    if not train_samples:
        raise ConfigError("no liver-containing slices remain in the training volumes")
    val_samples = _context_samples(model, dataset, val_ids)
    params = [t for _, t in model.context_named_parameters()]
    names = [n for n, _ in model.context_named_parameters()]
    stage = config.context_stage
    state = RmspropState.for_params(params, stage.learning_rate, config.rho, config.rms_eps)
    perm_rng = np.random.default_rng([config.seed, 31, 3])
    history: list[HistoryRow] = []
    checkpoints: list[TrainCheckpoint] = []

    def batch_loss(samples, idx) -> Tensor:
        rp = Tensor(np.stack([samples[i].reprs[0] for i in idx]))
        rm = Tensor(np.stack([samples[i].reprs[1] for i in idx]))
        rn = Tensor(np.stack([samples[i].reprs[2] for i in idx]))
        target = np.stack([samples[i].lesion_mask for i in idx])[:, None]
        out = model.context.forward(rp, rm, rn)
        return dice_loss(out, target, config.dice_smooth, config.squared_denominator)

    for epoch in range(stage.epochs):
        order = perm_rng.permutation(len(train_samples))
        step_losses = []
        for start in range(0, len(order), stage.batch_size):
            idx = order[start:start + stage.batch_size]
            loss = batch_loss(train_samples, idx)
            loss.assert_finite("combiner training loss")
            loss.backward()
            rmsprop_step(params, None, state)
            for p in params:
                p.zero_grad()
            step_losses.append(loss.item())
        if val_samples:
            v_losses = []
            for start in range(0, len(val_samples), stage.batch_size):
                idx = range(start, min(start + stage.batch_size, len(val_samples)))
                v_losses.append(batch_loss(val_samples, idx).item())
            val_loss = float(np.mean(v_losses))
        else:
            val_loss = None
        history.append(HistoryRow(epoch, 3, float(np.mean(step_losses)), val_loss))
        arrays = OrderedDict((n, p.data.copy()) for n, p in zip(names, params))
        checkpoints.append(TrainCheckpoint(epoch=epoch, stage=3, val_loss=val_loss,
                                           arrays=arrays,
                                           arch_config=model.arch.to_json()))
    return TrainResult(history=history, checkpoints=checkpoints,
                       best_index=_best_index(checkpoints),
                       train_volume_ids=train_ids, val_volume_ids=val_ids,
                       gradient_volume_ids=sorted({s.volume_id for s in train_samples}))


def write_loss_csv(history: Sequence[HistoryRow], path: str) -> None:
    """Deterministic CSV: repr() of float losses is byte-stable across runs."""
    def fmt(x):
        return "" if x is None else repr(float(x))

    lines = ["epoch,stage,train_loss,val_loss"]
    lines += [f"{h.epoch},{h.stage},{fmt(h.train_loss)},{fmt(h.val_loss)}" for h in history]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
