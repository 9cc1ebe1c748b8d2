import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smearmoe import numcore as nc
from smearmoe.errors import (
    DimensionError, EmptySequenceError, GradientAuditError, GraphError, SequenceTooShortError,
)
from smearmoe.numcore import _pykernels, kernels

try:
    from smearmoe.numcore import _ckernels
except ImportError:
    _ckernels = None

needs_compiled = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")

from oracles import naive_conv1d, naive_matmul


def conv_loss(x, k, b, w, stride, padding):
    return nc.dot_const(nc.conv1d(x, k, b, stride, padding), w)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = nc.const(np.eye(2))
    b = nc.const([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nc.matmul(a, b).value, [[1, 2], [3, 4]])


def test_matmul_row_col():
    assert nc.matmul(nc.const([[1.0, 2.0]]), nc.const([[3.0], [4.0]])).value.tolist() == [[11.0]]


def test_matmul_matches_naive_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(nc.matmul(nc.const(a), nc.const(b)).value, naive_matmul(a, b),
                               rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(nc.const(np.zeros((2, 3))), nc.const(np.zeros((2, 3))))


# --- conv1d ---------------------------------------------------------------

def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(9, 3))
    k = np.eye(3)[:, :, None]
    y = nc.conv1d(nc.const(x), nc.const(k), nc.const(np.zeros(3)), 1, 0)
    assert np.array_equal(y.value, x)


def test_conv1d_box_filter():
    x = nc.const([[1.0], [2.0], [3.0], [4.0]])
    y = nc.conv1d(x, nc.const(np.ones((1, 1, 3))), nc.const([0.0]), 1, 1)
    assert y.value.reshape(-1).tolist() == [3.0, 6.0, 9.0, 7.0]


@pytest.mark.parametrize("backend", [_pykernels, kernels])
def test_conv1d_matches_naive_oracle(backend):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 4))
    k = rng.normal(size=(8, 4, 3))
    b = rng.normal(size=8)
    got = backend.conv1d_forward(x, k, b, 2, 1)
    np.testing.assert_allclose(got, naive_conv1d(x, k, b, 2, 1), rtol=0, atol=1e-12)
    assert got.shape == ((20 + 2 - 3) // 2 + 1, 8)


def test_backends_agree_on_backward():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(17, 5))
    k = rng.normal(size=(6, 5, 5))
    g = rng.normal(size=((17 + 4 - 5) // 3 + 1, 6))
    a = _pykernels.conv1d_backward(x, k, g, 3, 2)
    c = kernels.conv1d_backward(x, k, g, 3, 2)
    for u, v in zip(a, c):
        np.testing.assert_allclose(u, v, rtol=0, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("n,cin,cout,width,stride,pad", [
    (20, 4, 8, 3, 2, 1), (17, 5, 6, 5, 3, 2), (300, 32, 48, 7, 4, 3), (9, 3, 2, 1, 1, 0),
])
def test_compiled_kernels_match_fallback(n, cin, cout, width, stride, pad):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(n, cin))
    k = rng.normal(size=(cout, cin, width))
    b = rng.normal(size=cout)
    y = _ckernels.conv1d_forward(x, k, b, stride, pad)
    np.testing.assert_allclose(y, _pykernels.conv1d_forward(x, k, b, stride, pad), rtol=0, atol=1e-11)
    g = rng.normal(size=y.shape)
    for u, v in zip(_ckernels.conv1d_backward(x, k, g, stride, pad),
                    _pykernels.conv1d_backward(x, k, g, stride, pad)):
        assert u.shape == v.shape
        np.testing.assert_allclose(u, v, rtol=0, atol=1e-11)


@needs_compiled
def test_dispatch_routes_large_layers_to_numpy(monkeypatch):
    calls = []
    monkeypatch.setattr(kernels, "_compiled", type("Spy", (), {
        "conv1d_forward": staticmethod(lambda *a: calls.append("c") or _ckernels.conv1d_forward(*a)),
    }))
    rng = np.random.default_rng(0)
    k = rng.normal(size=(48, 32, 7))
    kernels.conv1d_forward(rng.normal(size=(40, 32)), k, np.zeros(48), 4, 3)
    assert calls == ["c"]
    kernels.conv1d_forward(rng.normal(size=(400, 32)), k, np.zeros(48), 4, 3)
    assert calls == ["c"]


def test_conv1d_too_short():
    with pytest.raises(SequenceTooShortError):
        nc.conv1d(nc.const(np.zeros((2, 1))), nc.const(np.zeros((1, 1, 7))), nc.const([0.0]), 1, 1)


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        nc.conv1d(nc.const(np.zeros((5, 2))), nc.const(np.zeros((1, 3, 3))), nc.const([0.0]))


# --- relu / softmax / mean --------------------------------------------------

def test_relu_values_and_subgradient():
    assert nc.relu(nc.const([[-1.0, 2.0], [0.0, -3.0]])).value.tolist() == [[0, 2], [0, 0]]
    x = np.abs(np.random.default_rng(1).normal(size=(3, 3))) + 0.1
    assert np.array_equal(nc.relu(nc.const(x)).value, x)
    p = nc.param([-1.0, 2.0])
    nc.dot_const(nc.relu(p), [1.0, 1.0]).backward()
    assert p.grad.tolist() == [0.0, 1.0]
    z = nc.param([0.0])
    nc.dot_const(nc.relu(z), [1.0]).backward()
    assert z.grad.tolist() == [0.0]


def test_softmax_uniform_and_stable():
    assert nc.softmax_rows(nc.const([[0.0, 0.0, 0.0, 0.0]])).value.tolist() == [[0.25] * 4]
    y = nc.softmax_rows(nc.const([[1000.0, 0.0]])).value
    assert np.all(np.isfinite(y))
    assert y[0, 0] == pytest.approx(1.0) and y[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_high_precision_oracle():
    mpmath.mp.dps = 50
    exps = [mpmath.e ** v for v in (1, 2, 3)]
    total = sum(exps)
    oracle = [float(e / total) for e in exps]
    got = nc.softmax_rows(nc.const([[1.0, 2.0, 3.0]])).value[0]
    np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(row):
    y = nc.softmax_rows(nc.const([row])).value
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all(y >= 0)


def test_mean_over_time_cases():
    row = np.array([[0.3, 0.7]])
    assert np.array_equal(nc.mean_over_time(nc.const(row)).value, row[0])
    assert nc.mean_over_time(nc.const([[1.0, 0.0], [0.0, 1.0]])).value.tolist() == [0.5, 0.5]
    x = np.random.default_rng(2).normal(size=(7, 4))
    oracle = np.zeros(4)
    for t in range(7):
        for j in range(4):
            oracle[j] += x[t, j]
    np.testing.assert_allclose(nc.mean_over_time(nc.const(x)).value, oracle / 7, rtol=0, atol=1e-12)
    with pytest.raises(EmptySequenceError):
        nc.mean_over_time(nc.const(np.zeros((0, 3))))


# --- tape behaviour -----------------------------------------------------------

def _small_graph(rng):
    w = nc.param(rng.normal(size=(3, 2)))
    x = nc.const(rng.normal(size=(4, 3)))
    return w, nc.dot_const(nc.softmax_rows(nc.matmul(x, w)), rng.normal(size=(4, 2)))


def test_backward_twice_is_an_error():
    _, root = _small_graph(np.random.default_rng(0))
    root.backward()
    with pytest.raises(GraphError):
        root.backward()


def test_backward_replay_is_deterministic():
    w, root = _small_graph(np.random.default_rng(0))
    root.backward()
    first = w.grad.copy()
    nc.reset_graph(root)
    assert not w.grad.any()
    root.backward()
    assert np.array_equal(first, w.grad)


def test_no_grad_skips_tape():
    w = nc.param(np.ones((2, 2)))
    with nc.no_grad():
        y = nc.matmul(nc.const(np.ones((1, 2))), w)
    assert y.backward_fn is None and not y.requires_grad


# --- finite differences ---------------------------------------------------------

def test_finite_diff_square():
    w = nc.param([3.0])
    assert nc.finite_diff_check(lambda: nc.mse(w, [0.0]), [w], eps=1e-5) < 1e-9
    nc.mse(w, [0.0]).backward()
    assert w.grad[0] == pytest.approx(6.0)


def test_finite_diff_raises_on_nonfinite():
    w = nc.param([1.0])

    def f():
        base = nc.mse(w, [0.0])
        return base if w.value[0] == 1.0 else nc.add(base, nc.const(np.inf))

    with pytest.raises(GradientAuditError):
        nc.finite_diff_check(f, [w])


def _op_losses(rng):
    """One scalar loss per differentiable op, each with fresh parameters."""
    x = nc.param(rng.normal(size=(11, 3)))
    k = nc.param(rng.normal(size=(4, 3, 3)))
    b = nc.param(rng.normal(size=4))
    a = nc.param(rng.normal(size=(5, 3)))
    c = nc.param(rng.normal(size=(3, 4)))
    v = nc.param(rng.normal(size=4))
    stack = nc.param(rng.normal(size=(4, 2, 3)))
    wconv = rng.normal(size=((11 + 2 - 3) // 2 + 1, 4))
    w54 = rng.normal(size=(5, 4))
    w4 = rng.normal(size=4)
    w23 = rng.normal(size=(2, 3))
    # keep relu inputs away from the kink
    r = nc.param(rng.choice([-1, 1], size=(5, 4)) * rng.uniform(0.1, 2.0, size=(5, 4)))
    return {
        "matmul": ([a, c], lambda: nc.dot_const(nc.matmul(a, c), w54)),
        "conv1d": ([x, k, b], lambda: conv_loss(x, k, b, wconv, 2, 1)),
        "relu": ([r], lambda: nc.dot_const(nc.relu(r), w54)),
        "softmax_rows": ([a, c], lambda: nc.dot_const(nc.softmax_rows(nc.matmul(a, c)), w54)),
        "mean_over_time": ([a, c], lambda: nc.dot_const(nc.mean_over_time(nc.matmul(a, c)), w4)),
        "add_bias": ([a, c, v], lambda: nc.dot_const(nc.add_bias(nc.matmul(a, c), v), w54)),
        "weighted_sum": ([v, stack], lambda: nc.dot_const(nc.weighted_sum(v, stack), w23)),
        "mse": ([a, c], lambda: nc.mse(nc.matmul(a, c), w54)),
        "mul_scalar": ([v, a, c], lambda: nc.dot_const(
            nc.mul_scalar(nc.pick(v, 2), nc.matmul(a, c)), w54)),
        "rows": ([v, a, c], lambda: nc.dot_const(nc.scatter_rows(
            [(np.array([0, 3]), nc.scale_rows(nc.column_entries(nc.matmul(a, c), np.array([1, 4]), 2),
                                              nc.gather_rows(nc.matmul(a, c), np.array([0, 2]))))],
            5, 4), w54)),
        "concat_rows": ([a, c], lambda: nc.dot_const(
            nc.concat_rows([nc.matmul(a, c), nc.matmul(a, c)]), np.vstack([w54, w54]))),
    }


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_gradient_audit(seed):
    rng = np.random.default_rng(seed)
    for name, (params, f) in _op_losses(rng).items():
        err = nc.finite_diff_check(f, params, eps=1e-5)
        assert err < 1e-5, f"{name}: {err}"


def test_weighted_sum_one_hot_is_exact():
    stack = np.random.default_rng(0).normal(size=(4, 3, 5))
    for m in range(4):
        w = np.zeros(4)
        w[m] = 1.0
        assert np.array_equal(nc.weighted_sum(nc.const(w), nc.const(stack)).value, stack[m])
