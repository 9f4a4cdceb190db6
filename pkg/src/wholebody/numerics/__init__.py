"""Minimal dense-tensor engine with reverse-mode autodiff, the network
archetypes built on it, the optimizer, and the checkpoint container."""

from . import tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nets import (ArchConfig, CausalTransformer, Conv1dBlock, Linear, MLP,
                   Module, PointNetEncoder, UNet1d, causal_mask,
                   collect_params, sinusoidal_embedding)
from .optim import MomentOptimizer, OptimizerConfig, learning_rate
from .tensor import Tensor

__all__ = [
    "ArchConfig", "CausalTransformer", "Conv1dBlock", "Linear", "MLP",
    "Module", "MomentOptimizer", "OptimizerConfig", "PointNetEncoder",
    "Tensor", "UNet1d", "causal_mask", "collect_params", "learning_rate",
    "load_checkpoint", "save_checkpoint", "sinusoidal_embedding", "tensor",
]
