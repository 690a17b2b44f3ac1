"""Minimal deterministic neural toolkit (double precision, fixed layer set)."""

from .checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
    ModelKindMismatchError,
    UnknownModelKindError,
    load_checkpoint,
    register_model,
    save_checkpoint,
)
from .core import AdamState, MissingGradientError, Model, Parameter, adam_step, clip_gradients
from .gradcheck import NonFiniteLossError, finite_difference_check
from .layers import ShapeError, activation, activation_forward, layer_forward_backward

__all__ = [
    "AdamState", "CheckpointError", "CheckpointVersionError", "CorruptCheckpointError",
    "MissingGradientError", "Model", "ModelKindMismatchError", "NonFiniteLossError",
    "Parameter", "ShapeError", "UnknownModelKindError", "activation", "activation_forward",
    "adam_step", "clip_gradients", "finite_difference_check", "layer_forward_backward",
    "load_checkpoint", "register_model", "save_checkpoint",
]
