"""Numpy conv1d kernels; used when the compiled extension is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, width, stride, padding):
    if padding:
        x = np.pad(x, ((padding, padding), (0, 0)))
    # (T_out, C_in, width)
    return sliding_window_view(x, width, axis=0)[::stride]


def conv1d_forward(x, kernel, bias, stride, padding):
    out_ch, in_ch, width = kernel.shape
    win = _windows(x, width, stride, padding)
    cols = win.reshape(win.shape[0], in_ch * width)
    return cols @ kernel.reshape(out_ch, in_ch * width).T + bias


def conv1d_backward(x, kernel, grad_out, stride, padding):
    out_ch, in_ch, width = kernel.shape
    n_in = x.shape[0]
    win = _windows(x, width, stride, padding)
    n_out = win.shape[0]
    cols = win.reshape(n_out, in_ch * width)
    grad_kernel = (grad_out.T @ cols).reshape(out_ch, in_ch, width)
    grad_bias = grad_out.sum(axis=0)
    grad_cols = (grad_out @ kernel.reshape(out_ch, in_ch * width)).reshape(n_out, in_ch, width)
    grad_xp = np.zeros((n_in + 2 * padding, in_ch))
    span = stride * (n_out - 1) + 1
    for j in range(width):
        grad_xp[j:j + span:stride] += grad_cols[:, :, j]
    return grad_xp[padding:padding + n_in], grad_kernel, grad_bias
