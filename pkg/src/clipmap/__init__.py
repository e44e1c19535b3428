"""Compress a CLIP-style dual encoder through learnable Kronecker width maps and a depth-mixing matrix."""

from .autodiff import Tensor, backward, no_grad
from .errors import (
    CheckpointError,
    ClipMapError,
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    NumericError,
)
from .mapping import CompressionMaps, CompressionSpec, TowerSpec, build_student, init_maps, kron_map_apply
from .model import ClipModel, EncoderConfig, init_clip_model

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "CheckpointError", "ClipMapError", "ConfigError", "ContractError", "DimensionError", "InputError",
    "NumericError",
    "CompressionMaps", "CompressionSpec", "TowerSpec", "build_student", "init_maps", "kron_map_apply",
    "ClipModel", "EncoderConfig", "init_clip_model",
]
