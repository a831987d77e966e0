from . import tensor
from .layers import (
    LEAKY_SLOPE,
    AdaptiveGroupNorm,
    Dropout,
    GroupNorm,
    Linear,
    MLP,
    Module,
    ResSEBlock,
    SinusoidalEmbedding,
)
from .optim import Adam, EmaState, swap_in_ema
from .tensor import NumericError, Parameter, Tensor, forward_backward

__all__ = [
    "LEAKY_SLOPE",
    "Adam",
    "AdaptiveGroupNorm",
    "Dropout",
    "EmaState",
    "GroupNorm",
    "Linear",
    "MLP",
    "Module",
    "NumericError",
    "Parameter",
    "ResSEBlock",
    "SinusoidalEmbedding",
    "Tensor",
    "forward_backward",
    "swap_in_ema",
    "tensor",
]
