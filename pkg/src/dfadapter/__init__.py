"""Frozen Vision Transformer adapted for forgery detection by bottleneck (GBA)
and spatial (LSA) adapters, on a small numpy autodiff engine."""

from .autodiff import Graph, GraphError, ShapeError, Tensor, backward
from .model import GROUPS, Model, build_model, count_config_params, count_params, forward, vit_forward
from .vit import ConfigError, FreezePolicy, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FreezePolicy", "GROUPS", "Graph", "GraphError", "Model", "ModelConfig",
    "ShapeError", "Tensor", "backward", "build_model", "count_config_params", "count_params", "forward", "vit_forward",
]
