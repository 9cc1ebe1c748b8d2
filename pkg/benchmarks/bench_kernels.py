"""Time the compiled conv1d kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats N] [--frames T,T,...]

Both backends are imported directly, so the environment switch that picks
the default backend has no effect here. The ``dispatch`` rows time the
size-based routing the models actually use. Outputs are cross-checked
before timing.
"""
import argparse
import timeit

import numpy as np

from smearmoe.numcore import _pykernels, kernels

try:
    from smearmoe.numcore import _ckernels
except ImportError:
    _ckernels = None

# (name, in_channels, out_channels, width, stride, padding) for the convs the models use
LAYERS = [
    ("monolithic", 32, 48, 7, 4, 3),
    ("downsampler.conv1", 32, 48, 3, 2, 1),
    ("downsampler.conv2", 48, 16, 3, 2, 1),
]


def _time(fn, repeats):
    runs = timeit.repeat(fn, number=20, repeat=repeats)
    return min(runs) / 20


def bench_layer(impl, x, k, b, stride, pad, repeats):
    y = impl.conv1d_forward(x, k, b, stride, pad)
    g = np.ones_like(y)
    fwd = _time(lambda: impl.conv1d_forward(x, k, b, stride, pad), repeats)
    bwd = _time(lambda: impl.conv1d_backward(x, k, g, stride, pad), repeats)
    return fwd, bwd


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--frames", default="50,300", help="comma-separated input lengths")
    args = ap.parse_args(argv)
    lengths = [int(v) for v in args.frames.split(",")]
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'layer':20s} {'frames':>6s} {'backend':9s} {'forward_us':>11s} {'backward_us':>12s}")
    impls = [("python", _pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    impls.append(("dispatch", kernels))
    for frames in lengths:
        for name, cin, cout, width, stride, pad in LAYERS:
            x = rng.normal(size=(frames, cin))
            k = rng.normal(size=(cout, cin, width))
            b = rng.normal(size=cout)
            if _ckernels:
                ref = _pykernels.conv1d_forward(x, k, b, stride, pad)
                got = _ckernels.conv1d_forward(x, k, b, stride, pad)
                assert np.allclose(ref, got, rtol=0, atol=1e-10), f"{name}: backends disagree"
            for label, impl in impls:
                fwd, bwd = bench_layer(impl, x, k, b, stride, pad, args.repeats)
                print(f"{name:20s} {frames:6d} {label:9s} {fwd * 1e6:11.1f} {bwd * 1e6:12.1f}")


if __name__ == "__main__":
    main()
