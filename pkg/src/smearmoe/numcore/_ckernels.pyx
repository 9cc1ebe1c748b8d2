# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv1d kernels. Same contracts as ``_pykernels``.

Every inner loop is a contiguous ``y += a * x`` over raw row pointers, which
the C compiler can vectorise.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _axpy(double* y, const double* x, double a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        y[k] += a * x[k]


def conv1d_forward(const double[:, ::1] x, kernel, const double[::1] bias,
                   Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t out_ch = kernel.shape[0], in_ch = kernel.shape[1], width = kernel.shape[2]
    cdef Py_ssize_t n_in = x.shape[0]
    cdef Py_ssize_t n_out = (n_in + 2 * padding - width) // stride + 1
    # (width, in_ch, out_ch) so each (j, c) row over outputs is contiguous
    cdef const double[:, :, ::1] w = np.ascontiguousarray(np.transpose(kernel, (2, 1, 0)))
    out_arr = np.empty((n_out, out_ch))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t t, j, c, o, i
    cdef double* orow
    with nogil:
        for t in range(n_out):
            orow = &out[t, 0]
            for o in range(out_ch):
                orow[o] = bias[o]
            for j in range(width):
                i = t * stride + j - padding
                if i < 0 or i >= n_in:
                    continue
                for c in range(in_ch):
                    _axpy(orow, &w[j, c, 0], x[i, c], out_ch)
    return out_arr


def conv1d_backward(const double[:, ::1] x, kernel, const double[:, ::1] grad_out,
                    Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t out_ch = kernel.shape[0], in_ch = kernel.shape[1], width = kernel.shape[2]
    cdef Py_ssize_t n_in = x.shape[0], n_out = grad_out.shape[0]
    # (width, out_ch, in_ch) so each (j, o) row over inputs is contiguous
    cdef const double[:, :, ::1] wt = np.ascontiguousarray(np.transpose(kernel, (2, 0, 1)))
    gx_arr = np.zeros((n_in, in_ch))
    gw_arr = np.zeros((width, in_ch, out_ch))
    gb_arr = np.zeros(out_ch)
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t t, j, c, o, i
    cdef const double* grow
    cdef double* gxrow
    with nogil:
        for t in range(n_out):
            grow = &grad_out[t, 0]
            _axpy(&gb[0], grow, 1.0, out_ch)
            for j in range(width):
                i = t * stride + j - padding
                if i < 0 or i >= n_in:
                    continue
                for c in range(in_ch):
                    _axpy(&gw[j, c, 0], grow, x[i, c], out_ch)
                gxrow = &gx[i, 0]
                for o in range(out_ch):
                    _axpy(gxrow, &wt[j, o, 0], grow[o], in_ch)
    return gx_arr, np.ascontiguousarray(np.transpose(gw_arr, (2, 1, 0))), gb_arr
