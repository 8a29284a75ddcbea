from .core import Tape, Tensor, backward, is_grad_enabled, no_grad, ones, zeros
from .conv import conv2d, pool2d, transpose_conv2d
from .fft import ComplexTensor, fft2, ifft2
from .ops import (
    absolute,
    add,
    clamp_min,
    concat,
    custom_sigmoid,
    div,
    elementwise,
    exp,
    expand,
    l1_mean,
    log,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sqrt,
    sub,
    transpose,
)
from .random import reparam_normal

__all__ = [
    "Tape", "Tensor", "backward", "is_grad_enabled", "no_grad", "ones", "zeros",
    "conv2d", "pool2d", "transpose_conv2d", "ComplexTensor", "fft2", "ifft2",
    "absolute", "add", "clamp_min", "concat", "custom_sigmoid", "div", "elementwise", "exp",
    "expand", "l1_mean", "log", "mean", "mul", "relu", "reshape", "scale", "sigmoid", "sqrt",
    "sub", "transpose", "reparam_normal",
]
