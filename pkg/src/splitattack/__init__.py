"""Deterministic split-learning simulator with a shadow-model adversarial attack bench."""

from .attack import AttackConfig, AttackReport, craft, evaluate_attack
from .data import Dataset, PartitionPlan, SynthSpec, load_idx, synth_task
from .engine import ConfigurationError, InputError, Network, build_network
from .protocol import SplitModel, SplitPlan, partition, train_honest
from .shadow import ShadowConfig, train_shadow

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackReport",
    "ConfigurationError",
    "Dataset",
    "InputError",
    "Network",
    "PartitionPlan",
    "ShadowConfig",
    "SplitModel",
    "SplitPlan",
    "SynthSpec",
    "build_network",
    "craft",
    "evaluate_attack",
    "load_idx",
    "partition",
    "synth_task",
    "train_honest",
    "train_shadow",
]
