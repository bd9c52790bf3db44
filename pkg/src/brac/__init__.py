"""Offline actor-critic laboratory with pluggable behavior regularizers."""

__version__ = "0.1.0"

from .critics import QEnsemble, TargetCombiner
from .data import NoiseConfig, OfflineDataset, Transition
from .envs import make_env
from .harness import EvalProtocol, GridSpec
from .policies import CloneConfig, TanhGaussianPolicy, clone_behavior
from .trainer import (ALGORITHMS, BcqConfig, RunRecord, Trainer,
                      TrainerConfig, config_for_algo, train_offline)

__all__ = [
    "ALGORITHMS", "BcqConfig", "CloneConfig", "EvalProtocol", "GridSpec",
    "NoiseConfig", "OfflineDataset", "QEnsemble", "RunRecord",
    "TanhGaussianPolicy", "TargetCombiner", "Trainer", "TrainerConfig",
    "Transition", "clone_behavior", "config_for_algo", "make_env",
    "train_offline",
]
