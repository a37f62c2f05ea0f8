"""Minimal reverse-mode autodiff over numpy arrays."""
from .core import DTYPES, Tape, Tensor, backward, current_tape, dtype_name, no_grad
from .gradcheck import (
    NumericProbe, PiecewiseCheck, grad_check, grad_check_params, grad_check_piecewise, numeric_grad,
    probe_piecewise, rel_error,
)
from .ops import (
    add, as_tensor, batch_norm, bilinear_matrix, concat, conv2d, conv_transpose2d, div,
    elementwise, exp, gelu, getitem, layer_norm, log, matmul, maxpool2d, mean, mul, relu,
    reshape, resize_bilinear, scale, softmax, sub, sum, transpose,
)

__all__ = [
    "DTYPES", "Tape", "Tensor", "backward", "current_tape", "dtype_name", "no_grad",
    "NumericProbe", "PiecewiseCheck", "probe_piecewise", "grad_check", "grad_check_params", "grad_check_piecewise", "numeric_grad", "rel_error",
    "add", "as_tensor", "batch_norm", "bilinear_matrix", "concat", "conv2d",
    "conv_transpose2d", "div", "elementwise", "exp", "gelu", "getitem", "layer_norm", "log",
    "matmul", "maxpool2d", "mean", "mul", "relu", "reshape", "resize_bilinear", "scale",
    "softmax", "sub", "sum", "transpose",
]
