"""Distribution distances used in place of FID, plus transport-cost checks."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .model import encode_noise
from .tensor import no_grad

EXACT_W2_MAX = 256


def _points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return a


def random_directions(dim: int, n_projections: int, rng: np.random.Generator) -> np.ndarray:
    if n_projections < 1:
        raise ValueError("n_projections must be at least 1")
    v = rng.standard_normal((n_projections, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _quantiles(x: np.ndarray, m: int) -> np.ndarray:
    # x: (n, p) projected samples -> (m, p) matched quantiles
    xs = np.sort(x, axis=0)
    if xs.shape[0] == m:
        return xs
    levels = (np.arange(m) + 0.5) / m
    return np.quantile(xs, levels, axis=0)


def sliced_w2_per_direction(a, b, directions: np.ndarray) -> np.ndarray:
    a, b = _points(a, "a"), _points(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    pa, pb = a @ directions.T, b @ directions.T
    m = max(pa.shape[0], pb.shape[0])
    qa, qb = _quantiles(pa, m), _quantiles(pb, m)
    return np.mean((qa - qb) ** 2, axis=0)


def sliced_w2(a, b, n_projections: int = 128, rng: Optional[np.random.Generator] = None,
              directions: Optional[np.ndarray] = None) -> float:
    """Mean squared 1-D Wasserstein-2 distance over random unit directions.

    Equal-size sets use exact sorted matching; unequal sizes compare
    mid-point quantiles.
    """
    a = _points(a, "a")
    if directions is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        directions = random_directions(a.shape[1], n_projections, rng)
    return float(sliced_w2_per_direction(a, b, directions).mean())


def exact_w2(a, b) -> float:
    """Squared W2 between equal-size empirical measures via optimal assignment."""
    a, b = _points(a, "a"), _points(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"exact_w2 needs equal-size sets, got {a.shape} and {b.shape}")
    if a.shape[0] > EXACT_W2_MAX:
        raise ValueError(f"exact_w2 limited to {EXACT_W2_MAX} points, got {a.shape[0]}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b) -> float:
    """V-statistic energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (non-negative)."""
    a, b = _points(a, "a"), _points(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    val = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return float(max(val, 0.0))


@dataclass
class MetricReport:
    sliced_w2: float
    energy_distance: float
    exact_w2: Optional[float]
    n_samples: int
    seed: int

    def as_row(self) -> dict:
        row = asdict(self)
        row["exact_w2"] = "" if self.exact_w2 is None else self.exact_w2
        return row


def evaluate(samples, reference, n_projections: int = 128, seed: int = 1234,
             n_samples: Optional[int] = None) -> MetricReport:
    """Compare generated samples with held-out data using a fixed metric seed."""
    samples, reference = _points(samples, "samples"), _points(reference, "reference")
    n = min(samples.shape[0], reference.shape[0])
    if n_samples is not None:
        n = min(n, n_samples)
    samples, reference = samples[:n], reference[:n]
    rng = np.random.default_rng(seed)
    sw = sliced_w2(samples, reference, n_projections, rng)
    ed = energy_distance(samples, reference)
    ew = exact_w2(samples, reference) if n <= EXACT_W2_MAX else None
    return MetricReport(sw, ed, ew, n, seed)


def transport_cost_samples(enc, x0, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample squared transport costs: encoder-coupled and independent noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    with no_grad():
        x1, _ = encode_noise(enc, x0, rng)
    coupled = np.sum((x1.data - x0) ** 2, axis=1)
    xi = rng.standard_normal(x0.shape)
    independent = np.sum((xi - x0) ** 2, axis=1)
    return coupled, independent


def transport_cost_compare(enc, x0, rng: np.random.Generator) -> tuple[float, float]:
    coupled, independent = transport_cost_samples(enc, x0, rng)
    return float(coupled.mean()), float(independent.mean())
