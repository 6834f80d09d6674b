from . import functional
from .functional import (
    conv2d, global_avg_pool, linear, relu, resize_bilinear, sigmoid, slap,
    softmax, softmax_cross_entropy, upsample_nearest,
)
from .gradcheck import GradReport, grad_check, projection_loss
from .module import Buffer, ConvBlock, ConvSpec, Linear, Module, ModuleList, Parameter, Sequential
from .optim import AdamState, AdamW, adamw_step

__all__ = [
    "functional", "conv2d", "global_avg_pool", "linear", "relu", "resize_bilinear", "sigmoid",
    "slap", "softmax", "softmax_cross_entropy", "upsample_nearest",
    "GradReport", "grad_check", "projection_loss",
    "Buffer", "ConvBlock", "ConvSpec", "Linear", "Module", "ModuleList", "Parameter", "Sequential",
    "AdamState", "AdamW", "adamw_step",
]
