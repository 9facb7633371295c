"""Layout-graph reasoning for clothing landmark detection on a small numpy autodiff core."""

from .config import ModelConfig, SynthSpec, TrainConfig, load_config
from .errors import ConfigError, ContractError, DataError, DimensionError, LgrError, NumericError, ValidationError
from .graph import HierarchySpec, LayoutGraph, build_hierarchy, get_hierarchy
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "HierarchySpec",
    "LayoutGraph",
    "LgrError",
    "ModelConfig",
    "NumericError",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "backward",
    "build_hierarchy",
    "get_hierarchy",
    "load_config",
    "no_grad",
]
