import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catchup.sampler import CountingField, one_step_clean, sample, time_grid

from conftest import ConstantField, small_net

EPS = 1e-5


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["euler", "heun"]), st.integers(1, 40),
       st.floats(-5, 5), st.floats(-5, 5))
def test_constant_field_lands_exactly(solver, n, v0, v1):
    v = np.array([v0, v1])
    z1 = np.random.default_rng(n).standard_normal((6, 2))
    traj = sample(ConstantField(v), solver, n, z1=z1)
    assert np.allclose(traj.final, z1 - (1 - EPS) * v, atol=1e-12, rtol=0)


def test_linear_field_euler_closed_form():
    z1 = np.array([[1.0, -2.0]])
    for n in (1, 4, 16):
        out = sample(lambda x, t: x, "euler", n, z1=z1, epsilon=EPS).final
        assert np.allclose(out, z1 * (1 - (1 - EPS) / n) ** n, rtol=1e-13)


def test_linear_field_euler_error_halves():
    exact = np.exp(-(1 - EPS))
    z1 = np.ones((1, 1))
    errs = [abs(sample(lambda x, t: x, "euler", n, z1=z1, epsilon=EPS).final[0, 0] - exact)
            for n in (32, 64, 128)]
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_heun_converges_faster_than_euler():
    exact = np.exp(-(1 - EPS))
    z1 = np.ones((1, 1))
    ns = np.array([8, 16, 32, 64])

    def slope(solver):
        e = [abs(sample(lambda x, t: x, solver, n, z1=z1, epsilon=EPS).final[0, 0] - exact) for n in ns]
        return -np.polyfit(np.log(ns), np.log(e), 1)[0]

    assert slope("heun") > slope("euler") + 0.5


@pytest.mark.parametrize("n", [1, 2, 5, 16])
def test_nfe_accounting(n):
    z1 = np.zeros((3, 2))
    assert sample(ConstantField([1.0, 0.0]), "euler", n, z1=z1).nfe == n
    assert sample(ConstantField([1.0, 0.0]), "heun", n, z1=z1).nfe == 2 * n - 1


def test_trajectory_times_strictly_decrease():
    traj = sample(ConstantField([0.0, 0.0]), "heun", 7, z1=np.zeros((1, 2)))
    t = np.array(traj.times)
    assert t[0] == 1.0 and t[-1] == pytest.approx(EPS, abs=1e-15)
    assert np.all(np.diff(t) < 0)
    assert np.allclose(t, time_grid(7, EPS))


def test_never_queries_below_epsilon():
    seen = []

    def f(x, t):
        seen.append(t.min())
        return x

    sample(f, "heun", 5, z1=np.ones((2, 1)), epsilon=EPS)
    assert min(seen) >= EPS - 1e-15


def test_seeded_sampling_is_deterministic():
    net = small_net()
    a = sample(net, "heun", 4, n=50, rng=np.random.default_rng(3)).final
    b = sample(net, "heun", 4, n=50, rng=np.random.default_rng(3)).final
    assert np.array_equal(a, b)


def test_non_finite_state_reports_step():
    def blowup(x, t):
        return np.full_like(x, np.inf) if t[0] < 0.6 else x

    with pytest.raises(FloatingPointError, match="step"):
        sample(blowup, "euler", 4, z1=np.ones((1, 1)))


def test_bad_arguments():
    with pytest.raises(ValueError):
        sample(ConstantField([0, 0]), "rk4", 3, z1=np.zeros((1, 2)))
    with pytest.raises(ValueError):
        sample(ConstantField([0, 0]), "euler", 0, z1=np.zeros((1, 2)))
    with pytest.raises(ValueError):
        sample(lambda x, t: x, "euler", 3)


@settings(max_examples=30, deadline=None)
@given(st.floats(EPS, 1.0), st.floats(-3, 3))
def test_one_step_clean_recovers_start(m, v):
    z0 = np.array([[0.5, -1.0], [2.0, 0.1]])
    zm = z0 + m * v
    assert np.allclose(one_step_clean(zm, m, ConstantField([v, v])), z0, atol=1e-12)


def test_one_step_clean_near_identity_at_epsilon():
    z = np.array([[1.0, 2.0]])
    out = one_step_clean(z, EPS, ConstantField([3.0, -3.0]))
    assert np.allclose(out, z, atol=1e-4)


def test_counting_field_broadcasts_scalar_time():
    f = CountingField(lambda x, t: x * t[:, None])
    assert np.array_equal(f(np.ones((3, 1)), 0.5), np.full((3, 1), 0.5))
    assert f.calls == 1
