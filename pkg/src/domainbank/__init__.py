"""Multi-domain image translation with one shared auto-encoder and per-domain banks."""

from .errors import (ArchitectureMismatch, ChecksumError, ConfigError, ContractError,
                     DimensionError, DivergenceError, DomainBankError, FormatError, VersionError)
from .losses import LossReport, LossWeights
from .model import ArchConfig, DomainBankModel, ImageBatch, LatentCode, build, micro_arch
from .trainer import FreezeMask, Trainer, TrainConfig, incremental_train, schedule_pair, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ArchitectureMismatch", "ChecksumError", "ConfigError", "ContractError",
    "DimensionError", "DivergenceError", "DomainBankError", "DomainBankModel", "FormatError",
    "FreezeMask", "ImageBatch", "LatentCode", "LossReport", "LossWeights", "TrainConfig",
    "Trainer", "VersionError", "build", "incremental_train", "micro_arch", "schedule_pair",
    "train",
]
