"""Residual block pairs, the UNet-like FCN, and the two-network tandem model.

The first network segments the liver from a single axial slice; the second
receives the slice concatenated with the first network's representation and
segments lesions. Both are built from two block kinds: kind A holds one 3x3
convolution, kind B holds two. Blocks carry an additive short skip (1x1
projection when the channel count changes); the expanding path adds the
matching contracting output at every level (long skips). Downsampling is max
pooling in kind A and a stride-2 convolution in kind B; upsampling is
nearest-neighbour.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import checkpoint as ckpt
from .errors import (CheckpointMismatchError, ConfigError, DimensionError,
                     UsageError)
from .tensor import (Tensor, add, batchnorm2d, concat, conv2d, dropout,
                     grid_subsample2x, maxpool2x2, no_grad, relu, sigmoid,
                     upsample_nearest2x)

BLOCK_KINDS = ("A", "B")
RESAMPLE_MODES = ("down", "up", "none")


@dataclass
class BlockSpec:
    kind: str
    filters: int
    resample: str = "none"

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"block kind must be one of {BLOCK_KINDS}, got {self.kind!r}")
        if self.filters < 1:
            raise ConfigError(f"block filters must be positive, got {self.filters}")
        if self.resample not in RESAMPLE_MODES:
            raise ConfigError(f"resample must be one of {RESAMPLE_MODES}, got {self.resample!r}")


@dataclass
class FcnConfig:
    input_channels: int
    initial_filters: int
    down_blocks: list[BlockSpec]
    up_blocks: list[BlockSpec]
    dropout_p: float = 0.1

    @property
    def depth(self) -> int:
        return len(self.down_blocks)

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be positive, got {self.input_channels}")
        if self.initial_filters < 1:
            raise ConfigError(f"initial_filters must be positive, got {self.initial_filters}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if len(self.up_blocks) != len(self.down_blocks):
            raise ConfigError(
                f"expanding path must mirror contracting path: {len(self.down_blocks)} "
                f"down blocks vs {len(self.up_blocks)} up blocks")
        if not self.down_blocks:
            raise ConfigError("at least one down/up level is required")
        for i, spec in enumerate(self.down_blocks):
            if spec.resample != "down":
                raise ConfigError(f"down block {i} has resample={spec.resample!r}")
        depth = self.depth
        down_filters = [s.filters for s in self.down_blocks]
        for j, spec in enumerate(self.up_blocks):
            if spec.resample != "up":
                raise ConfigError(f"up block {j} has resample={spec.resample!r}")
            level = depth - 2 - j  # level whose resolution this block restores
            expected = down_filters[level] if level >= 0 else self.initial_filters
            if spec.filters != expected:
                raise ConfigError(
                    f"up block {j} must mirror the contracting path with {expected} "
                    f"filters, got {spec.filters}")

    @classmethod
    def from_levels(cls, input_channels: int, initial_filters: int,
                    level_filters: Iterable[int], level_kinds: Iterable[str],
                    dropout_p: float = 0.1) -> "FcnConfig":
        level_filters = list(level_filters)
        level_kinds = list(level_kinds)
        if len(level_kinds) != len(level_filters):
            raise ConfigError(
                f"{len(level_filters)} level filters but {len(level_kinds)} block kinds")
        depth = len(level_filters)
        down = [BlockSpec(k, f, "down") for k, f in zip(level_kinds, level_filters)]
        up = []
        for j in range(depth):
            level = depth - 2 - j
            filters = level_filters[level] if level >= 0 else initial_filters
            up.append(BlockSpec(level_kinds[depth - 1 - j], filters, "up"))
        cfg = cls(input_channels=input_channels, initial_filters=initial_filters,
                  down_blocks=down, up_blocks=up, dropout_p=dropout_p)
        cfg.validate()
        return cfg


@dataclass
class ArchConfig:
    """JSON-facing model description; also embedded in every checkpoint."""

    input_channels: int = 1
    initial_filters: int = 32
    level_filters: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    level_kinds: list[str] = field(default_factory=lambda: ["A", "B", "B", "B"])
    dropout_p: float = 0.1
    context_enabled: bool = False

    @property
    def depth(self) -> int:
        return len(self.level_filters)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "initial_filters": self.initial_filters,
            "level_filters": list(self.level_filters),
            "level_kinds": list(self.level_kinds),
            "dropout_p": self.dropout_p,
            "context_enabled": self.context_enabled,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchConfig":
        return cls(**dict(d))

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))

    def fcn1_config(self) -> FcnConfig:
        return FcnConfig.from_levels(self.input_channels, self.initial_filters,
                                     self.level_filters, self.level_kinds, self.dropout_p)

    def fcn2_config(self) -> FcnConfig:
        # The second network sees the slice stacked with the first network's
        # representation, hence representation channels + 1.
        return FcnConfig.from_levels(self.initial_filters + self.input_channels,
                                     self.initial_filters, self.level_filters,
                                     self.level_kinds, self.dropout_p)


class Conv2dLayer:
    """3x3 or 1x1 convolution layer with He-normal weights and zero bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1):
        fan_in = in_channels * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Tensor(rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel)),
                             track_grad=True)
        self.bias = Tensor(np.zeros(out_channels), track_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNorm2dLayer:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        from .tensor import default_dtype
        self.gamma = Tensor(np.ones(channels), track_grad=True)
        self.beta = Tensor(np.zeros(channels), track_grad=True)
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, train, self.momentum, self.eps)

    def named_params(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix: str):
        return [(f"{prefix}.running_mean", self.running_mean),
                (f"{prefix}.running_var", self.running_var)]


class Block:
    """One residual block. Pre-activation layout; the main path ends in a
    convolution so zeroed weights reduce the block to its skip path."""

    def __init__(self, spec: BlockSpec, in_channels: int, dropout_p: float,
                 rng: np.random.Generator):
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.filters
        self.dropout_p = dropout_p
        k = spec.kind
        down = spec.resample == "down"
        if k == "A":
            self.bn1 = BatchNorm2dLayer(in_channels)
            self.conv1 = Conv2dLayer(in_channels, spec.filters, 3, rng)
            self.bn2 = None
            self.conv2 = None
        else:
            self.bn1 = BatchNorm2dLayer(in_channels)
            self.conv1 = Conv2dLayer(in_channels, spec.filters, 3, rng,
                                     stride=2 if down else 1)
            self.bn2 = BatchNorm2dLayer(spec.filters)
            self.conv2 = Conv2dLayer(spec.filters, spec.filters, 3, rng)
        if in_channels != spec.filters:
            self.skip_proj = Conv2dLayer(in_channels, spec.filters, 1, rng)
        else:
            self.skip_proj = None

    @property
    def main_convs(self) -> list[Conv2dLayer]:
        return [c for c in (self.conv1, self.conv2) if c is not None]

    def forward(self, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        mode = self.spec.resample
        if mode == "down" and (x.shape[2] % 2 or x.shape[3] % 2):
            raise DimensionError(
                f"down block requires even spatial extents, got {x.shape[2]}x{x.shape[3]}")
        h = x
        if mode == "up":
            h = upsample_nearest2x(h)
        if self.spec.kind == "A":
            if mode == "down":
                h = maxpool2x2(h)
            h = self.bn1(h, train)
            h = relu(h)
            h = dropout(h, self.dropout_p, rng, train)
            h = self.conv1(h)
        else:
            h = self.bn1(h, train)
            h = relu(h)
            h = self.conv1(h)  # stride 2 here when downsampling
            h = self.bn2(h, train)
            h = relu(h)
            h = dropout(h, self.dropout_p, rng, train)
            h = self.conv2(h)
        skip = x
        if mode == "down":
            skip = maxpool2x2(skip) if self.spec.kind == "A" else grid_subsample2x(skip)
        elif mode == "up":
            skip = upsample_nearest2x(skip)
        if self.skip_proj is not None:
            skip = self.skip_proj(skip)
        return add(h, skip)

    def named_params(self, prefix: str):
        out = []
        out += self.bn1.named_params(f"{prefix}.bn1")
        out += self.conv1.named_params(f"{prefix}.conv1")
        if self.conv2 is not None:
            out += self.bn2.named_params(f"{prefix}.bn2")
            out += self.conv2.named_params(f"{prefix}.conv2")
        if self.skip_proj is not None:
            out += self.skip_proj.named_params(f"{prefix}.skip_proj")
        return out

    def named_buffers(self, prefix: str):
        out = self.bn1.named_buffers(f"{prefix}.bn1")
        if self.bn2 is not None:
            out += self.bn2.named_buffers(f"{prefix}.bn2")
        return out


def forward_block(block: Block, x: Tensor, train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    return block.forward(x, train=train, rng=rng)


class Fcn:
    """Contracting/expanding fully convolutional network with long skips."""

    def __init__(self, config: FcnConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.init_conv = Conv2dLayer(config.input_channels, config.initial_filters, 3, rng)
        self.down_blocks: list[Block] = []
        channels = config.initial_filters
        for spec in config.down_blocks:
            self.down_blocks.append(Block(spec, channels, config.dropout_p, rng))
            channels = spec.filters
        self.up_blocks: list[Block] = []
        for spec in config.up_blocks:
            self.up_blocks.append(Block(spec, channels, config.dropout_p, rng))
            channels = spec.filters
        self.repr_channels = channels  # == initial_filters by config validation
        self._long_skip_adds = 0

    @property
    def depth(self) -> int:
        return len(self.down_blocks)

    def forward(self, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None, long_skips: bool = True) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"FCN input must be NCHW, got shape {x.shape}")
        if x.shape[1] != self.config.input_channels:
            raise DimensionError(
                f"FCN expects {self.config.input_channels} input channels, got {x.shape[1]}")
        h_ext, w_ext = x.shape[2], x.shape[3]
        for level in range(self.depth):
            if h_ext % 2 or w_ext % 2:
                raise DimensionError(
                    f"spatial extent {x.shape[2]}x{x.shape[3]} is not divisible by 2 "
                    f"at contracting level {level}")
            h_ext //= 2
            w_ext //= 2
        h = self.init_conv(x)
        per_level = [h]
        for block in self.down_blocks:
            h = block.forward(h, train=train, rng=rng)
            per_level.append(h)
        self._long_skip_adds = 0
        depth = self.depth
        for j, block in enumerate(self.up_blocks):
            h = block.forward(h, train=train, rng=rng)
            if long_skips:
                h = add(h, per_level[depth - 1 - j])
                self._long_skip_adds += 1
        return h

    def named_params(self, prefix: str):
        out = self.init_conv.named_params(f"{prefix}.init_conv")
        for i, block in enumerate(self.down_blocks):
            out += block.named_params(f"{prefix}.down{i}")
        for j, block in enumerate(self.up_blocks):
            out += block.named_params(f"{prefix}.up{j}")
        return out

    def named_buffers(self, prefix: str):
        out = []
        for i, block in enumerate(self.down_blocks):
            out += block.named_buffers(f"{prefix}.down{i}")
        for j, block in enumerate(self.up_blocks):
            out += block.named_buffers(f"{prefix}.up{j}")
        return out


def forward_fcn(fcn: Fcn, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None, long_skips: bool = True) -> Tensor:
    return fcn.forward(x, train=train, rng=rng, long_skips=long_skips)


class ContextCombiner:
    """Fuses the lesion-path representations of three consecutive slices."""

    def __init__(self, repr_channels: int, rng: np.random.Generator):
        self.conv = Conv2dLayer(3 * repr_channels, repr_channels, 3, rng)
        self.head = Conv2dLayer(repr_channels, 1, 1, rng)

    def forward(self, r_prev: Tensor, r_mid: Tensor, r_next: Tensor) -> Tensor:
        if not (r_prev.shape == r_mid.shape == r_next.shape):
            raise DimensionError(
                f"context representations must share a shape, got "
                f"{r_prev.shape}, {r_mid.shape}, {r_next.shape}")
        h = concat([r_prev, r_mid, r_next], axis=1)
        return sigmoid(self.head(self.conv(h)))

    def named_params(self, prefix: str):
        return (self.conv.named_params(f"{prefix}.conv")
                + self.head.named_params(f"{prefix}.head"))


class TandemModel:
    """Two FCNs in cascade plus 1x1 sigmoid classifiers for liver and lesion."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.fcn1 = Fcn(arch.fcn1_config(), rng)
        self.liver_head = Conv2dLayer(self.fcn1.repr_channels, 1, 1, rng)
        self.fcn2 = Fcn(arch.fcn2_config(), rng)
        self.lesion_head = Conv2dLayer(self.fcn2.repr_channels, 1, 1, rng)
        self.context = ContextCombiner(self.fcn2.repr_channels, rng) if arch.context_enabled else None

    @classmethod
    def build(cls, arch: ArchConfig, seed: int = 0) -> "TandemModel":
        return cls(arch, seed)

    def forward(self, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None):
        """Returns (liver_prob, lesion_prob, fcn1_repr, fcn2_repr)."""
        r1 = self.fcn1.forward(x, train=train, rng=rng)
        liver = sigmoid(self.liver_head(r1))
        x2 = concat([x, r1], axis=1)
        r2 = self.fcn2.forward(x2, train=train, rng=rng)
        lesion = sigmoid(self.lesion_head(r2))
        return liver, lesion, r1, r2

    # -- parameter registry ---------------------------------------------------

    def named_parameters(self, include_context: bool = True):
        out = self.fcn1.named_params("fcn1")
        out += self.liver_head.named_params("liver_head")
        out += self.fcn2.named_params("fcn2")
        out += self.lesion_head.named_params("lesion_head")
        if include_context and self.context is not None:
            out += self.context.named_params("context")
        return out

    def parameters(self, include_context: bool = True) -> list[Tensor]:
        return [t for _, t in self.named_parameters(include_context)]

    def context_named_parameters(self):
        if self.context is None:
            raise UsageError("model was built without a context combiner")
        return self.context.named_params("context")

    def named_buffers(self):
        return self.fcn1.named_buffers("fcn1") + self.fcn2.named_buffers("fcn2")

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, tensor in self.named_parameters():
            state[name] = tensor.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        state = self.state_arrays()
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        if missing or extra:
            raise CheckpointMismatchError(
                f"checkpoint does not match architecture: missing {missing[:4]}, "
                f"unexpected {extra[:4]}")
        for name, dst in state.items():
            src = np.asarray(arrays[name])
            if src.shape != dst.shape:
                raise CheckpointMismatchError(
                    f"checkpoint entry {name!r} has shape {src.shape}, "
                    f"model expects {dst.shape}")
            np.copyto(dst, src.astype(dst.dtype, copy=False))

    # -- numpy-in / numpy-out helpers used by inference ------------------------

    def _wrap(self, img2d: np.ndarray) -> Tensor:
        arr = np.asarray(img2d, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-D slice, got shape {arr.shape}")
        return Tensor(arr[None, None])

    def predict_slice(self, img2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            liver, lesion, _, _ = self.forward(self._wrap(img2d), train=False)
        return (np.asarray(liver.data[0, 0], dtype=np.float32),
                np.asarray(lesion.data[0, 0], dtype=np.float32))

    def slice_repr(self, img2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Liver probabilities plus the pre-classifier lesion representation."""
        with no_grad():
            liver, _, _, r2 = self.forward(self._wrap(img2d), train=False)
        return (np.asarray(liver.data[0, 0], dtype=np.float32),
                np.asarray(r2.data[0], dtype=np.float32))

    def combine_reprs(self, r_prev: np.ndarray, r_mid: np.ndarray,
                      r_next: np.ndarray) -> np.ndarray:
        if self.context is None:
            raise UsageError("model was built without a context combiner")
        with no_grad():
            out = self.context.forward(Tensor(r_prev[None]), Tensor(r_mid[None]),
                                       Tensor(r_next[None]))
        return np.asarray(out.data[0, 0], dtype=np.float32)


def tandem_forward(model: TandemModel, x: Tensor, train: bool = False,
                   rng: np.random.Generator | None = None):
    """(liver_prob, lesion_prob, fcn1_repr) for a batch of slices."""
    liver, lesion, r1, _ = model.forward(x, train=train, rng=rng)
    return liver, lesion, r1


def context_forward(model: TandemModel, reprs: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    if model.context is None:
        raise UsageError("model was built without a context combiner")
    r_prev, r_mid, r_next = reprs
    return model.context.forward(r_prev, r_mid, r_next)


def save_model(model: TandemModel, path: str, meta: Mapping[str, str] | None = None) -> None:
    all_meta = {"arch_config": model.arch.to_json()}
    if meta:
        all_meta.update(meta)
    ckpt.save_checkpoint(path, model.state_arrays(), meta=all_meta)


def load_model(path: str) -> TandemModel:
    arrays, meta = ckpt.load_checkpoint(path)
    if "arch_config" not in meta:
        raise CheckpointMismatchError(f"{path}: checkpoint has no embedded architecture config")
    model = TandemModel(ArchConfig.from_json(meta["arch_config"]))
    model.load_state(arrays)
    return model
