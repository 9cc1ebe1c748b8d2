"""Dense float64 arrays with reverse-mode differentiation."""
from . import kernels
from .gradcheck import finite_diff_check, relative_error
from .graph import (
    Node, add, add_bias, as_node, column_entries, concat_rows, const, conv1d, dot_const, gather_rows,
    matmul, mean_of, mean_over_time, mse, mul_scalar, no_grad, param, pick, relu,
    reset_graph, scale, scale_rows, scatter_rows, softmax_rows, sum_nodes, take,
    weighted_sum, zero_grads,
)

__all__ = [
    "Node", "add", "add_bias", "as_node", "column_entries", "concat_rows", "const", "conv1d", "dot_const",
    "finite_diff_check", "gather_rows", "kernels", "matmul", "mean_of", "mean_over_time",
    "mse", "mul_scalar", "no_grad", "param", "pick", "relative_error", "relu",
    "reset_graph", "scale", "scale_rows", "scatter_rows", "softmax_rows", "sum_nodes",
    "take", "weighted_sum", "zero_grads",
]
