from . import ops
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from .ops import DimensionError, bilinear_sample, matmul, softmax
from .optim import AdamState, AdamW, sgd_adamw_step, warmup_cosine
from .tensor import (
    ComputationTape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
)

__all__ = [
    "AdamState",
    "AdamW",
    "ComputationTape",
    "Conv2d",
    "DimensionError",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "Parameter",
    "Tensor",
    "as_tensor",
    "backward",
    "bilinear_sample",
    "default_dtype",
    "get_default_dtype",
    "matmul",
    "no_grad",
    "ops",
    "sgd_adamw_step",
    "softmax",
    "warmup_cosine",
]
