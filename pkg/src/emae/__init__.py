"""Masked-autoencoder pretraining with a parallel mask strategy and a
stop-gradient self-consistency loss, on a small numpy autodiff engine."""

from .errors import (
    EMAEError,
    FormatError,
    IncompatibleCheckpoint,
    InvalidConfiguration,
    InvalidPair,
    NumericAbort,
    ShapeError,
)
from .masking import MaskPartition, OverlapSet, generate_partition, mask_ratio, overlap
from .model import MaskedAutoencoder, ModelConfig, patchify, unpatchify
from .losses import LossMode, total_loss
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "EMAEError", "FormatError", "IncompatibleCheckpoint", "InvalidConfiguration", "InvalidPair",
    "NumericAbort", "ShapeError", "MaskPartition", "OverlapSet", "generate_partition", "mask_ratio",
    "overlap", "MaskedAutoencoder", "ModelConfig", "patchify", "unpatchify", "LossMode", "total_loss",
    "TrainConfig",
]
