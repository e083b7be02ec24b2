"""Top-K activation sparsity (Q-Sparse style) for a small numpy transformer."""

from .model import FfnKind, ModelConfig, Transformer, count_parameters, relu2glu
from .scaling_law import ScalingLawParams, ScalingObservation, fit, solve_optimal_sparsity
from .sparse_ops import Mode, SparsityConfig, sparse_linear
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = [
    "FfnKind",
    "Mode",
    "ModelConfig",
    "ScalingLawParams",
    "ScalingObservation",
    "SparsityConfig",
    "Tensor",
    "TrainConfig",
    "Transformer",
    "count_parameters",
    "fit",
    "relu2glu",
    "solve_optimal_sparsity",
    "sparse_linear",
    "train",
]
