"""
Tensor core: numpy-backed reverse-mode autodiff and the kernels the model needs.
"""

from ohformer.tensor.core import (
    Function,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    float64_mode,
    grad_enabled,
    no_grad,
)
from ohformer.tensor.ops import (
    add,
    concat,
    exp,
    gelu,
    log,
    log_softmax,
    matmul,
    mul,
    ones,
    pad2d,
    relu,
    segment_sum,
    softmax_lastdim,
    sqrt,
    zeros,
)
from ohformer.tensor.conv import (
    avg_pool2d,
    bilinear_sample,
    conv2d,
    conv_output_size,
    max_pool2d,
    nearest_index,
    nearest_upsample2d,
)
from ohformer.tensor.norm import batch_norm_1d, layer_norm
from ohformer.tensor.module import Module, ModuleList, Parameter
from ohformer.tensor.random import Rng
from ohformer.tensor.gradcheck import finite_diff_check
from ohformer.tensor.parallel import get_num_threads, parallel_map, set_num_threads, threads_from_env

__all__ = [
    "Function",
    "Module",
    "ModuleList",
    "Parameter",
    "Rng",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool2d",
    "backward",
    "batch_norm_1d",
    "bilinear_sample",
    "concat",
    "conv2d",
    "conv_output_size",
    "default_dtype",
    "exp",
    "finite_diff_check",
    "float64_mode",
    "gelu",
    "get_num_threads",
    "grad_enabled",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "max_pool2d",
    "mul",
    "nearest_index",
    "nearest_upsample2d",
    "no_grad",
    "ones",
    "pad2d",
    "parallel_map",
    "relu",
    "segment_sum",
    "set_num_threads",
    "softmax_lastdim",
    "sqrt",
    "threads_from_env",
    "zeros",
]
