"""Minimal differentiable-computation core (reverse-mode tape over numpy)."""

from . import ops
from .layers import (
    Dense,
    GaussianPoseParams,
    add_cross_attention,
    add_film,
    build_mlp,
    cross_attention,
    dense,
    film,
    gaussian_entropy,
    gaussian_log_prob,
    mlp_forward,
    sample_reparam,
    softmax_entropy,
)
from .optim import Lamb, cosine_lr
from .params import ParamStore
from .tensor import Tensor, as_tensor, no_grad

__all__ = [
    "Dense",
    "GaussianPoseParams",
    "Lamb",
    "ParamStore",
    "Tensor",
    "add_cross_attention",
    "add_film",
    "as_tensor",
    "build_mlp",
    "cosine_lr",
    "cross_attention",
    "dense",
    "film",
    "gaussian_entropy",
    "gaussian_log_prob",
    "mlp_forward",
    "no_grad",
    "ops",
    "sample_reparam",
    "softmax_entropy",
]
