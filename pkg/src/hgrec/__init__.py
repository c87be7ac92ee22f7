"""Hyperbolic graph-transformer collaborative filtering.

Lorentz-model geometry kernels, a parameter-free hyperbolic graph
convolution, exact and kernel-linearized hyperbolic cross-attention, a
margin-ranking training loop, and long-tail-aware ranking metrics.
"""

from .attention import (
    AttentionConfig,
    HeadParams,
    NormParams,
    RandomFeatureMap,
)
from .geometry import CurvatureSpace
from .graph import BipartiteGraph, SplitDataset, load_interactions, split_train_test
from .model import LossConfig, ModelState, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, Trainer, gradient_check

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "BipartiteGraph",
    "CurvatureSpace",
    "HeadParams",
    "LossConfig",
    "ModelState",
    "NormParams",
    "RandomFeatureMap",
    "SplitDataset",
    "TrainConfig",
    "Trainer",
    "forward",
    "gradient_check",
    "load_checkpoint",
    "load_interactions",
    "save_checkpoint",
    "split_train_test",
    "__version__",
]
