"""Backend selection for the conv1d hot kernels.

The compiled extension is used when it imports; set ``SMEARMOE_PURE_PYTHON=1``
to force the numpy fallback. The compiled loops beat numpy's im2col on small
problems, where call overhead dominates, but lose to BLAS once a layer has
a few hundred thousand multiply-adds, so large calls are routed to numpy even
when the extension is present (see benchmarks/bench_kernels.py).
"""
import os

from . import _pykernels

BACKEND = "python"
_compiled = None

if os.environ.get("SMEARMOE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled

        BACKEND = "compiled"
    except ImportError:
        pass

# crossover points measured on the model's layer shapes
FORWARD_MAX_MACS = 200_000
BACKWARD_MAX_MACS = 120_000


def _macs(n_in, kernel, stride, padding):
    out_ch, in_ch, width = kernel.shape
    n_out = (n_in + 2 * padding - width) // stride + 1
    return n_out * in_ch * width * out_ch


def conv1d_forward(x, kernel, bias, stride, padding):
    if _compiled is not None and _macs(x.shape[0], kernel, stride, padding) <= FORWARD_MAX_MACS:
        return _compiled.conv1d_forward(x, kernel, bias, stride, padding)
    return _pykernels.conv1d_forward(x, kernel, bias, stride, padding)


def conv1d_backward(x, kernel, grad_out, stride, padding):
    if _compiled is not None and _macs(x.shape[0], kernel, stride, padding) <= BACKWARD_MAX_MACS:
        return _compiled.conv1d_backward(x, kernel, grad_out, stride, padding)
    return _pykernels.conv1d_backward(x, kernel, grad_out, stride, padding)
