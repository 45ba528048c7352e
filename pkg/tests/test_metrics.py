import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catchup.metrics import (energy_distance, evaluate, exact_w2, random_directions, sliced_w2,
                             sliced_w2_per_direction, transport_cost_compare, transport_cost_samples)
from catchup.model import NoiseEncoder

points = arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)),
                elements=st.floats(-5, 5, width=64))


def brute_force_w2(a, b):
    best = np.inf
    for perm in itertools.permutations(range(len(b))):
        best = min(best, np.mean(np.sum((a - b[list(perm)]) ** 2, axis=1)))
    return best


def test_sliced_zero_on_same_multiset(rng):
    a = rng.standard_normal((50, 3))
    assert sliced_w2(a, a[rng.permutation(50)], 64, rng) == pytest.approx(0.0, abs=1e-24)


def test_sliced_one_dimensional_unit_gap():
    assert sliced_w2([[0.0]], [[1.0]], 5) == pytest.approx(1.0)


def test_translation_exact_in_one_dimension(rng):
    a = rng.standard_normal((40, 1))
    assert sliced_w2(a, a + 2.5, 8, rng) == pytest.approx(6.25, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(points, arrays(np.float64, (3,), elements=st.floats(-3, 3, width=64)))
def test_translation_shift_bounded_by_norm(a, c):
    dirs = random_directions(3, 32, np.random.default_rng(0))
    val = sliced_w2(a, a + c, directions=dirs)
    # projecting a pure shift gives (theta . c)^2 per direction
    assert val == pytest.approx(np.mean((dirs @ c) ** 2), rel=1e-9, abs=1e-12)
    assert val <= c @ c + 1e-12


def test_exact_w2_two_point_pairings():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.1], [0.0, 0.1]])
    straight = np.mean([0.01, 0.01])
    crossing = np.mean([1.01, 1.01])
    assert exact_w2(a, b) == pytest.approx(min(straight, crossing))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_exact_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((5, 2)), r.standard_normal((5, 2))
    assert exact_w2(a, b) == pytest.approx(brute_force_w2(a, b), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_sliced_is_a_lower_bound(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((30, 3)), r.standard_normal((30, 3)) + 0.3
    assert sliced_w2(a, b, 64, r) <= exact_w2(a, b) + 1e-12


@settings(max_examples=30, deadline=None)
@given(points, points)
def test_symmetry_and_non_negativity(a, b):
    assert energy_distance(a, b) >= 0
    assert energy_distance(a, b) == pytest.approx(energy_distance(b, a), rel=1e-12, abs=1e-12)
    if a.shape == b.shape:
        assert exact_w2(a, b) == pytest.approx(exact_w2(b, a), rel=1e-12, abs=1e-12)


def test_zero_on_identical(rng):
    a = rng.standard_normal((20, 2))
    assert exact_w2(a, a) == 0.0
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)


def test_energy_detects_shift(rng):
    a = rng.standard_normal((300, 2))
    assert energy_distance(a, a + 1.0) > 0.3


def test_sliced_projection_count_stability(rng):
    a, b = rng.standard_normal((500, 4)), 1.3 * rng.standard_normal((500, 4))
    per = sliced_w2_per_direction(a, b, random_directions(4, 256, np.random.default_rng(1)))
    se = per.std(ddof=1) / np.sqrt(per.size)
    small = sliced_w2(a, b, 128, np.random.default_rng(2))
    large = sliced_w2(a, b, 256, np.random.default_rng(3))
    assert abs(small - large) < 3 * se * np.sqrt(2)


def test_unequal_sizes_use_quantiles(rng):
    a = rng.standard_normal((1000, 2))
    assert sliced_w2(a, a[:500], 32, rng) < 0.01


def test_errors():
    with pytest.raises(ValueError):
        sliced_w2(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        sliced_w2(np.zeros((3, 2)), np.zeros((3, 2)), 0)
    with pytest.raises(ValueError):
        exact_w2(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        exact_w2(np.zeros((300, 2)), np.zeros((300, 2)))
    with pytest.raises(ValueError):
        energy_distance(np.zeros((3, 2)), np.zeros((3, 1)))


def test_report_has_exact_only_for_small_n(rng):
    a, b = rng.standard_normal((400, 2)), rng.standard_normal((400, 2))
    assert evaluate(a, b).exact_w2 is None
    small = evaluate(a, b, n_samples=100)
    assert small.exact_w2 is not None and small.n_samples == 100
    assert small.as_row()["seed"] == 1234
    assert evaluate(a, b).sliced_w2 == evaluate(a, b).sliced_w2


def test_prior_encoder_costs_agree(rng):
    enc = NoiseEncoder(2, 4, rng=rng)
    x0 = rng.standard_normal((10_000, 2)) * 0.5 + 1.0
    c, i = transport_cost_samples(enc, x0, rng)
    se = np.sqrt(c.var() / c.size + i.var() / i.size)
    assert abs(c.mean() - i.mean()) < 3 * se


def test_zero_data_costs_equal_dimension(rng):
    enc = NoiseEncoder(3, 4, rng=rng)
    c, i = transport_cost_compare(enc, np.zeros((20_000, 3)), rng)
    assert c == pytest.approx(3.0, rel=0.03) and i == pytest.approx(3.0, rel=0.03)
