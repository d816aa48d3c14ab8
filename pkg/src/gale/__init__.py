"""Geometry-aware physics-attention surrogate with a verification harness.

Transformer blocks mix linear-cost state-slice self-attention with gated
cross-attention to a multi-scale ball-query context, trained and checked
against analytic potential-flow data.
"""

__version__ = "0.1.0"

from .context import ContextTokens, GeometrySample, LocalStream
from .model import Checkpoint, GaleModel, ModelConfig, StreamSpec, init_model, model_forward
from .neighbors import MultiScaleSchedule, Scale
from .tensor import ParamStore, Tensor, gradcheck

__all__ = [
    "Checkpoint",
    "ContextTokens",
    "GaleModel",
    "GeometrySample",
    "LocalStream",
    "ModelConfig",
    "MultiScaleSchedule",
    "ParamStore",
    "Scale",
    "StreamSpec",
    "Tensor",
    "__version__",
    "gradcheck",
    "init_model",
    "model_forward",
]
