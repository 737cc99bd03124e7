"""Differentiable operator set, Adam, and gradient-check oracle."""
from .functional import (
    BN_MOMENTUM,
    add,
    batch_norm,
    bce_with_logits,
    bilinear_upsample,
    conv2d,
    conv_output_size,
    global_avg_pool,
    global_max_pool,
    group_norm,
    interpolation_matrix,
    max_pool2d,
    mul,
    pointwise_activation,
    relu,
    reshape,
    sigmoid,
    sum_all,
)
from .gradcheck import finite_difference_gradient, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import Param, Tensor, as_tensor, count_ops, is_grad_enabled, iter_graph, no_grad

__all__ = [
    "BN_MOMENTUM", "Adam", "AdamState", "Param", "Tensor", "adam_step", "add", "as_tensor",
    "batch_norm", "bce_with_logits", "bilinear_upsample", "conv2d", "conv_output_size",
    "count_ops", "finite_difference_gradient", "global_avg_pool", "global_max_pool",
    "group_norm", "interpolation_matrix", "is_grad_enabled", "iter_graph", "max_pool2d", "mul",
    "no_grad", "pointwise_activation", "relative_error", "relu", "reshape", "sigmoid", "sum_all",
]
