import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catchup import tensor as T
from catchup.tensor import NonFiniteError, ShapeError, Tape, Tensor, no_grad


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check_grad(build, *shapes, seed=0, tol=1e-7):
    rng = np.random.default_rng(seed)
    values = [rng.standard_normal(s) for s in shapes]
    params = [T.parameter(v.copy()) for v in values]
    with Tape() as tape:
        loss = build(*params)
    grads = tape.backward(loss)
    for k, p in enumerate(params):
        def f(x, k=k):
            args = [Tensor(v) for v in values]
            args[k] = Tensor(x)
            with no_grad():
                return build(*args).item()
        num = numeric_grad(f, values[k].copy())
        assert np.allclose(grads[p], num, atol=tol, rtol=1e-6), (k, grads[p], num)


def test_elementwise_grads():
    check_grad(lambda a, b: T.sum(T.mul(a, b) + T.sub(a, b)), (3, 4), (3, 4))
    check_grad(lambda a: T.mean(T.exp(T.scale(a, 0.3))), (5,))
    check_grad(lambda a: T.sum(T.silu(a) * a), (2, 3))
    check_grad(lambda a: T.sum(T.neg(a) * 2.0 + 1.5), (4,))


def test_matrix_grads():
    check_grad(lambda x, w: T.sum(T.silu(T.matmul(x, w))), (3, 4), (4, 2))
    check_grad(lambda x, w, b: T.mean(T.linear(x, w, b) * T.linear(x, w, b)), (5, 3), (3, 2), (2,))


def test_layer_norm_grad():
    check_grad(lambda x, g, b: T.sum(T.silu(T.layer_norm(x, g, b)) * T.layer_norm(x, g, b)),
               (4, 5), (5,), (5,), tol=1e-6)


def test_row_scale_grad_and_constant_factors():
    f = np.array([0.5, -2.0, 3.0])
    check_grad(lambda x: T.sum(T.row_scale(x, f) * x), (3, 2))


def test_mse_matches_numpy(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert T.mse(Tensor(a), Tensor(b)).item() == pytest.approx(np.mean((a - b) ** 2), abs=1e-15)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        T.row_scale(Tensor(np.zeros((2, 3))), np.ones(3))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0])))


def test_no_grad_records_nothing():
    p = T.parameter(np.ones(3))
    with Tape() as tape:
        with no_grad():
            T.sum(p * p)
    assert len(tape) == 0


def test_stop_gradient_blocks_flow():
    p = T.parameter(np.array([2.0, 3.0]))
    with Tape() as tape:
        loss = T.sum(p * T.stop_gradient(p))
    g = tape.backward(loss)
    assert np.array_equal(g[p], np.array([2.0, 3.0]))


def test_backward_accumulates_reused_inputs():
    p = T.parameter(np.array([1.5]))
    with Tape() as tape:
        loss = T.sum(p * p * p)
    assert tape.backward(loss)[p][0] == pytest.approx(3 * 1.5 ** 2)


def test_tape_cleared_after_backward():
    p = T.parameter(np.ones(2))
    with Tape() as tape:
        loss = T.sum(p * p)
    tape.backward(loss)
    assert len(tape) == 0


finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_sub_mul_grads_are_exact(a, b):
    pa, pb = T.parameter(a.copy()), T.parameter(b.copy())
    with Tape() as tape:
        loss = T.sum(pa * pb + (pa - pb))
    g = tape.backward(loss)
    assert np.array_equal(g[pa], b + 1.0)
    assert np.array_equal(g[pb], a - 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-10, 10, width=64)))
def test_layer_norm_rows_are_standardized(x):
    out = T.layer_norm(Tensor(x), np.ones(6), np.zeros(6), eps=1e-5).data
    var = x.var(axis=1)
    wide = var > 1e-2
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out[wide].var(axis=1), var[wide] / (var[wide] + 1e-5), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (10,), elements=st.floats(-700, 700, width=64)))
def test_silu_is_finite_everywhere(x):
    y = T.silu(Tensor(x)).data
    assert np.all(np.isfinite(y))
    assert np.all(y >= -0.2785)  # global minimum of x*sigmoid(x)
