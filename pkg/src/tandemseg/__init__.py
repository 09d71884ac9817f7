"""Cascaded two-FCN liver and liver-lesion segmentation toolkit.

Pure NumPy training stack (tensor engine with reverse-mode gradients,
RMSprop, soft Dice loss), synthetic phantom data, flip-averaged ensemble
inference, morphological post-processing, and surface/overlap/detection
metrics, wired together behind a ``tandemseg`` command-line interface.
"""

__version__ = "0.1.0"

from .architecture import ArchConfig, TandemModel, load_model, save_model
from .augment import AugmentConfig, augment_pair
from .errors import (CheckpointMismatchError, ConfigError, DimensionError,
                     EngineError, FormatError, TandemsegError, UsageError,
                     ValidationError)
from .inference import PredictionVolume, predict_volume
from .metrics import MetricsConfig, aggregate, evaluate_case
from .phantom import PhantomSpec, gen_phantom, gen_phantom_batch
from .postprocess import PostprocessConfig, finalize
from .tensor import Tensor, no_grad, precision
from .training import TrainConfig, train, train_context_combiner
from .volume import SegVolume, Volume, read_volume, write_volume

__all__ = [
    "__version__",
    "ArchConfig", "TandemModel", "load_model", "save_model",
    "AugmentConfig", "augment_pair",
    "TandemsegError", "ConfigError", "DimensionError", "ValidationError",
    "FormatError", "CheckpointMismatchError", "UsageError", "EngineError",
    "PredictionVolume", "predict_volume",
    "MetricsConfig", "aggregate", "evaluate_case",
    "PhantomSpec", "gen_phantom", "gen_phantom_batch",
    "PostprocessConfig", "finalize",
    "Tensor", "no_grad", "precision",
    "TrainConfig", "train", "train_context_combiner",
    "SegVolume", "Volume", "read_volume", "write_volume",
]
