"""Multi-target Runge-Kutta schemes for catch-up sampling.

A scheme fixes its stage points once (nodes ``a`` and stage matrix ``b``,
both in units of the step ``h``) and provides one weight vector per
alignment step ``j``, so the targets for ``t - h, t - 2h, ...`` all reuse
the same stage velocities. Coefficients are exact fractions; conversion to
floats happens only when a scheme is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

VelocityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

F = Fraction


@dataclass(frozen=True)
class RkScheme:
    """Stage layout plus per-step weights.

    ``nodes[i]`` is the time offset (in units of h) of stage ``i``; stage 0
    is always at offset 0. ``b[i]`` holds the coefficients of stage ``i`` on
    the earlier stages. ``base_weights`` are the ``j = 1`` weights; every
    built-in scheme scales them linearly in ``j``.
    """

    label: str
    nodes: tuple[Fraction, ...]
    b: tuple[tuple[Fraction, ...], ...]
    base_weights: tuple[Fraction, ...]
    n_align: int

    @property
    def n_stages(self) -> int:
        return len(self.nodes)

    def weights(self, j: int) -> tuple[Fraction, ...]:
        if not 1 <= j <= self.n_align:
            raise ValueError(f"{self.label}: alignment step j={j} outside 1..{self.n_align}")
        return tuple(j * w for w in self.base_weights)

    def weight_table(self) -> dict[int, tuple[Fraction, ...]]:
        return {j: self.weights(j) for j in range(1, self.n_align + 1)}


def build_scheme(label: str) -> RkScheme:
    key = label.upper()
    if key == "RK12":
        return RkScheme("RK12", (F(0),), ((),), (F(1),), 1)
    if key == "RK23":
        return RkScheme("RK23", (F(0), F(1)), ((), (F(1),)), (F(1, 2), F(1, 2)), 2)
    if key == "RK34":
        return RkScheme(
            "RK34",
            (F(0), F(1), F(2)),
            ((), (F(1),), (F(7, 4), F(1, 4))),
            (F(5, 12), F(2, 3), F(-1, 12)),
            3,
        )
    raise ValueError(f"unknown scheme {label!r}; expected RK12, RK23 or RK34")


def rk34_with_nodes(a2, a3) -> RkScheme:
    """Three-stage scheme with non-equidistant stage offsets ``a2``, ``a3``.

    Expert use only. The weights solve the two moment conditions on the
    nodes; ``b32`` is then fixed by the ``w2*b32*a2 = 1/6`` condition.
    """
    a2, a3 = F(a2), F(a3)
    det = a2 * a3 * (a3 - a2)
    if det == 0:
        raise ValueError("stage offsets must be distinct and non-zero")
    w3 = (F(1, 3) * a2 - F(1, 2) * a2 * a2) / det
    w2 = (F(1, 2) * a3 * a3 - F(1, 3) * a3) / det
    w1 = 1 - w2 - w3
    b32 = F(1, 6) / (w2 * a2)
    return RkScheme("RK34", (F(0), a2, a3), ((), (a2,), (a3 - b32, b32)), (w1, w2, w3), 3)


def verify_order_conditions(scheme: RkScheme, j: int,
                            weights: Optional[Sequence[Fraction]] = None) -> list[Fraction]:
    """Residuals of the j-scaled stage/weight conditions (all zero when satisfied).

    RK23: ``w1+w2-j, a2*w2-j/2, b21*w2-j/2, a2-b21``.
    RK34: ``w1+w2+w3-j, a2-b21, a3-b31-b32, w2*a2+w3*a3-j/2,
    w2*a2^2+w3*a3^2-j/3, w2*b32*a2-j/6``.
    RK12 only has ``w1-j``.
    """
    w = tuple(weights) if weights is not None else scheme.weights(j)
    j = F(j)
    if scheme.n_stages == 1:
        return [w[0] - j]
    if scheme.n_stages == 2:
        a2, b21 = scheme.nodes[1], scheme.b[1][0]
        return [w[0] + w[1] - j, a2 * w[1] - j / 2, b21 * w[1] - j / 2, a2 - b21]
    a2, a3 = scheme.nodes[1], scheme.nodes[2]
    b21, (b31, b32) = scheme.b[1][0], scheme.b[2]
    return [
        w[0] + w[1] + w[2] - j,
        a2 - b21,
        a3 - b31 - b32,
        w[1] * a2 + w[2] * a3 - j / 2,
        w[1] * a2 ** 2 + w[2] * a3 ** 2 - j / 3,
        w[1] * b32 * a2 - j / 6,
    ]


def fixed_stage_residual(scheme: RkScheme) -> Fraction:
    """Constraint that lets one stage layout serve every ``j``.

    RK23: ``a2 - b21``; RK34: ``a3 - a2 - (3*a3 - 3*a2 + 1)*b32``.
    """
    if scheme.n_stages == 1:
        return F(0)
    if scheme.n_stages == 2:
        return scheme.nodes[1] - scheme.b[1][0]
    a2, a3 = scheme.nodes[1], scheme.nodes[2]
    b32 = scheme.b[2][1]
    return a3 - a2 - (3 * a3 - 3 * a2 + 1) * b32


def taylor_residuals(scheme: RkScheme, j: int) -> dict[str, Fraction]:
    """Residuals against the Taylor expansion of a step of length ``j*h``.

    Autonomous elementary-differential conditions up to third order:
    ``sum w = j``, ``sum w a = j^2/2``, ``sum w a^2 = j^3/3`` and
    ``sum_i w_i sum_k b_ik a_k = j^3/6``. Non-zero entries show which
    powers of h the target for step ``j`` fails to reproduce.
    """
    w = scheme.weights(j)
    a = scheme.nodes
    j = F(j)
    res = {"order1": sum(w, F(0)) - j}
    if scheme.n_stages >= 2:
        res["order2"] = sum((wi * ai for wi, ai in zip(w, a)), F(0)) - j ** 2 / 2
    if scheme.n_stages >= 3:
        res["order3_quad"] = sum((wi * ai ** 2 for wi, ai in zip(w, a)), F(0)) - j ** 3 / 3
        chain = sum(
            (w[i] * sum((scheme.b[i][k] * a[k] for k in range(i)), F(0)) for i in range(scheme.n_stages)),
            F(0),
        )
        res["order3_chain"] = chain - j ** 3 / 6
    return res


@dataclass
class CatchUpTargets:
    """Catch-up states ``x_{t-jh}`` and the velocities evaluated there."""

    states: dict[int, np.ndarray]
    times: dict[int, np.ndarray]
    velocities: dict[int, np.ndarray]
    stage_velocities: list[np.ndarray] = field(default_factory=list)


def _column(v, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] == 1:
        v = np.full(n, v[0])
    if v.shape[0] != n:
        raise ValueError(f"expected {n} per-sample values, got {v.shape[0]}")
    return v


def catch_up_targets(f: VelocityFn, x_t, t, h, scheme: RkScheme,
                     t_min: Optional[float] = None, k1: Optional[np.ndarray] = None,
                     with_velocities: bool = True) -> CatchUpTargets:
    """Integrate ``dx/dt = f`` backward from ``t`` with shared stages.

    ``t`` and ``h`` are scalars or per-sample arrays. Stage ``i`` is
    evaluated at ``x_t - h * sum_k b_ik k_k`` and time ``t - a_i h``; the
    target for step ``j`` is ``x_t - h * sum_i w_i(j) k_i``. ``k1`` may be
    supplied when ``f(x_t, t)`` is already known. Times below ``t_min`` are
    clamped before calling ``f``.
    """
    x = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    n = x.shape[0]
    t = _column(t, n)
    h = _column(h, n)
    if np.any(h <= 0):
        raise ValueError("step size must be positive")
    hc = h.reshape((n,) + (1,) * (x.ndim - 1))

    def call(xs, ts):
        if t_min is not None:
            ts = np.maximum(ts, t_min)
        v = np.asarray(f(xs, ts), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite stage velocity in catch-up sampling")
        return v

    ks: list[np.ndarray] = []
    for i in range(scheme.n_stages):
        if i == 0:
            ks.append(call(x, t) if k1 is None else np.asarray(k1, dtype=np.float64))
            continue
        incr = sum(float(c) * ks[k] for k, c in enumerate(scheme.b[i]))
        ks.append(call(x - hc * incr, t - float(scheme.nodes[i]) * h))

    states, times, vels = {}, {}, {}
    for j in range(1, scheme.n_align + 1):
        w = scheme.weights(j)
        incr = sum(float(c) * ks[i] for i, c in enumerate(w))
        xj = x - hc * incr
        if not np.all(np.isfinite(xj)):
            raise FloatingPointError(f"non-finite catch-up state for j={j}")
        states[j] = xj
        times[j] = t - j * h
        if with_velocities:
            vels[j] = call(xj, times[j])
    return CatchUpTargets(states, times, vels, ks)


@dataclass(frozen=True)
class AnalyticODE:
    """Velocity field with a closed-form flow map (for order probes)."""

    velocity: VelocityFn
    flow: Callable[[np.ndarray, float, float], np.ndarray]  # (x at t0, t0, t1) -> x at t1


def decay_ode() -> AnalyticODE:
    """dx/dt = -x, so x(t1) = x(t0) * exp(-(t1 - t0))."""
    return AnalyticODE(lambda x, t: -x, lambda x, t0, t1: x * np.exp(-(t1 - t0)))


@dataclass
class ProbeResult:
    scheme: str
    j: int
    step_sizes: list[float]
    errors: list[float]
    slope: float
    reliable: bool


ERROR_FLOOR = 1e-14


def truncation_order_probe(scheme: RkScheme, j: int, ode: Optional[AnalyticODE] = None,
                           h_grid: Sequence[float] = (1 / 16, 1 / 32, 1 / 64, 1 / 128),
                           t0: float = 1.0, x0: float = 1.0) -> ProbeResult:
    """Fit the log-log slope of the single-step error of target ``j``.

    The expected slope is ``p + 1`` for a method of order ``p``. Points
    whose error sits below the round-off floor are dropped; with fewer than
    two points left the result is flagged unreliable.
    """
    ode = ode or decay_ode()
    hs = sorted((float(h) for h in h_grid), reverse=True)
    x = np.array([[x0]])
    errors = []
    for h in hs:
        tg = catch_up_targets(ode.velocity, x, t0, h, scheme, with_velocities=False)
        exact = ode.flow(x, t0, t0 - j * h)
        errors.append(float(np.abs(tg.states[j] - exact).max()))
    keep = [(h, e) for h, e in zip(hs, errors) if e > ERROR_FLOOR]
    if len(keep) < 2:
        return ProbeResult(scheme.label, j, hs, errors, float("nan"), False)
    lh = np.log([h for h, _ in keep])
    le = np.log([e for _, e in keep])
    slope = float(np.polyfit(lh, le, 1)[0])
    return ProbeResult(scheme.label, j, hs, errors, slope, len(keep) == len(hs))
