"""Self-attention variants in a numpy Vision Transformer, plus a corruption-robustness harness.

Submodules:

- :mod:`attnrobust.tensor`: tape-based reverse-mode autodiff over numpy
- :mod:`attnrobust.attention`: softmax, sigmoid, linear, doubly stochastic and cosine attention
- :mod:`attnrobust.vit`: Vision Transformer model, AdamW training step, checkpoints
- :mod:`attnrobust.corruption`: seeded fog and Gaussian-noise corruptions
- :mod:`attnrobust.data`: CIFAR binary and raw-container ingestion
- :mod:`attnrobust.harness`: four-scenario experiments and reports
"""

from .attention import VARIANTS, AttentionConfig
from .errors import (
    AttnRobustError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    ParseError,
)
from .harness import ExperimentConfig, ExperimentReport, relative_accuracy, report_emit, run_experiment
from .tensor import Tensor, backward, no_grad
from .vit import ViTConfig, ViTModel

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "AttentionConfig",
    "AttnRobustError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DomainError",
    "ParseError",
    "ExperimentConfig",
    "ExperimentReport",
    "Tensor",
    "ViTConfig",
    "ViTModel",
    "backward",
    "no_grad",
    "relative_accuracy",
    "report_emit",
    "run_experiment",
]
