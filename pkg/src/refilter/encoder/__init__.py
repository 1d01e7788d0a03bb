"""Miniature transformer encoder with quadrant-masked and reduced
candidate-to-candidate-free attention."""

from .backend import available_backends, get_backend
from .config import EncoderConfig, InputLayout, QuadrantFlags
from .masks import attention_mask, build_quadrant_mask
from .model import (
    EncodeCache,
    ParameterSet,
    PassCounter,
    add_linear_head,
    attention_entry_count,
    encode,
    encode_backward,
    forward_full,
    forward_structured,
    grad_check,
    init_encoder_params,
    validate_params,
)

__all__ = [
    "EncoderConfig",
    "InputLayout",
    "QuadrantFlags",
    "EncodeCache",
    "ParameterSet",
    "PassCounter",
    "add_linear_head",
    "attention_entry_count",
    "attention_mask",
    "available_backends",
    "build_quadrant_mask",
    "encode",
    "encode_backward",
    "forward_full",
    "forward_structured",
    "get_backend",
    "grad_check",
    "init_encoder_params",
    "validate_params",
]
