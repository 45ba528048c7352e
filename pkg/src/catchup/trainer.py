"""One-session catch-up distillation training, with RF and CD baselines."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import EmaState, NoiseEncoder, VelocityNet, encode_noise
from .optim import Adam
from .rk import RkScheme, build_scheme, catch_up_targets
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STEP_STRATEGIES = ("fixed", "uniform", "rule")
CATCHUP_SOURCES = ("ema", "live")
WEIGHT_MODES = ("vanilla", "dynamic")
MODES = ("cud", "rf_baseline", "cd_baseline")
SCHEMES = ("RK12", "RK23", "RK34")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epsilon: float = 1e-5
    h_hat: float = 1 / 16
    step_strategy: str = "uniform"
    catchup_source: str = "live"
    loss_weight_mode: str = "vanilla"
    scheme: str = "RK12"
    total_iters: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-3
    kl_beta: float = 20.0
    ema_decay: float = 0.9999
    ema_start: int = 1
    seed: int = 0
    mode: str = "cud"
    c_skip: Optional[float] = 0.75
    width: int = 128
    n_blocks: int = 4
    temb_dim: int = 64
    encoder_width: int = 64
    log_every: int = 1
    checkpoint_every: int = 0

    @property
    def n_align(self) -> int:
        return build_scheme(self.scheme).n_align

    def validate(self) -> "TrainConfig":
        self.scheme = str(self.scheme).upper()
        checks = [
            (self.epsilon > 0, "epsilon must be positive"),
            (0 < self.h_hat < 1, "h_hat must lie in (0, 1)"),
            (self.step_strategy in STEP_STRATEGIES, f"step_strategy must be one of {STEP_STRATEGIES}"),
            (self.catchup_source in CATCHUP_SOURCES, f"catchup_source must be one of {CATCHUP_SOURCES}"),
            (self.loss_weight_mode in WEIGHT_MODES, f"loss_weight_mode must be one of {WEIGHT_MODES}"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.scheme in SCHEMES, f"scheme must be one of {SCHEMES}"),
            (self.total_iters >= 0, "total_iters must be non-negative"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.kl_beta >= 0, "kl_beta must be non-negative"),
            (0 <= self.ema_decay <= 1, "ema_decay must lie in [0, 1]"),
            (self.log_every >= 1, "log_every must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.h_hat * self.n_align >= 1:
            raise ConfigError("h_hat * n_align must be below 1")
        if self.mode == "cd_baseline" and self.scheme != "RK12":
            raise ConfigError("cd_baseline uses a single Euler catch-up step (scheme RK12)")
        return self

    def loss_weights(self, i: int) -> tuple[float, float]:
        """(kd weight, ground-truth weight) at zero-based iteration ``i``."""
        if self.loss_weight_mode == "vanilla":
            return 1.0, 1.0
        frac = i / self.total_iters if self.total_iters else 0.0
        return frac, 1.0 - frac

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def sample_step_size(strategy: str, t, h_hat: float, epsilon: float,
                     rng: np.random.Generator, n_align: int = 1) -> np.ndarray:
    """Per-sample catch-up step, capped at ``t / n_align`` so ``t - j*h >= 0``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if strategy == "fixed":
        h = np.full_like(t, h_hat)
    elif strategy == "uniform":
        h = rng.uniform(epsilon, h_hat, size=t.shape)
    elif strategy == "rule":
        h = t * h_hat
    else:
        raise ConfigError(f"unknown step strategy {strategy!r}")
    return np.minimum(h, t / n_align)


@dataclass
class MetricsRecord:
    iteration: int
    loss_total: float
    loss_kd: list[float]
    loss_gt: list[float]
    kl_term: float
    mean_h: float
    wall_ms: float = 0.0

    def columns(self) -> list[str]:
        n = len(self.loss_gt)
        return (["iteration", "loss_total"] + [f"loss_kd_{j}" for j in range(1, n + 1)]
                + [f"loss_gt_{j}" for j in range(1, n + 1)] + ["kl_term", "mean_h", "wall_ms"])

    def values(self) -> list:
        return ([self.iteration, self.loss_total] + list(self.loss_kd) + list(self.loss_gt)
                + [self.kl_term, self.mean_h, self.wall_ms])


@dataclass
class LossParts:
    loss: Tensor
    kd: list[float]
    gt: list[float]
    kl: float
    mean_h: float


def _interpolate(x1: Tensor, x0: np.ndarray, t: np.ndarray) -> Tensor:
    return T.row_scale(x1, t) + T.row_scale(Tensor(x0), 1.0 - t)


def cud_loss(net: VelocityNet, enc: NoiseEncoder, x0: np.ndarray, config: TrainConfig,
             rng: np.random.Generator, iteration: int = 0, ema: Optional[EmaState] = None,
             scheme: Optional[RkScheme] = None, t: Optional[np.ndarray] = None,
             xi: Optional[np.ndarray] = None, h: Optional[np.ndarray] = None) -> LossParts:
    """Training objective for one batch; call inside a :class:`Tape` for grads.

    Random draws happen in the order t, noise, step size, whatever the
    mode, so runs that differ only in mode see the same randomness. Any of
    them can be supplied explicitly instead.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    scheme = scheme or build_scheme(config.scheme)
    eps = config.epsilon
    if t is None:
        t = rng.uniform(eps, 1.0, size=n)
    x1, kl = encode_noise(enc, x0, rng, xi=xi)
    if h is None:
        h = sample_step_size(config.step_strategy, t, config.h_hat, eps, rng, scheme.n_align)
    xt = _interpolate(x1, x0, t)
    heads = net(xt, t)
    velocity_gt = x1 - Tensor(x0)
    w_kd, w_gt = config.loss_weights(iteration)

    kd_terms: list[Tensor] = []
    gt_terms: list[Tensor] = []
    if config.mode == "cd_baseline":
        if ema is None:
            raise ValueError("cd_baseline needs an EMA teacher")
        with T.no_grad():
            x_prev = xt.data - h[:, None] * heads[0].data
            target = ema.model.velocity(x_prev, np.maximum(t - h, eps))
        kd_terms.append(T.mse(heads[0], Tensor(target)))
        loss = kd_terms[0]
    else:
        if config.mode == "cud":
            if config.catchup_source == "live":
                source, k1 = net, heads[0].data
            else:
                if ema is None:
                    raise ValueError("catchup_source='ema' needs an EMA state")
                source, k1 = ema.model, None
            with T.no_grad():
                targets = catch_up_targets(source.velocity, xt.data, t, h, scheme, t_min=eps, k1=k1)
            kd_terms = [T.mse(head, Tensor(targets.velocities[j]))
                        for j, head in enumerate(heads, start=1)]
        else:
            w_kd = 0.0
        gt_terms = [T.mse(head, velocity_gt) for head in heads]
        loss = None
        if kd_terms and w_kd != 0.0:
            loss = T.scale(_total(kd_terms), w_kd)
        gt_part = T.scale(_total(gt_terms), w_gt)
        loss = gt_part if loss is None else loss + gt_part
    loss = loss + T.scale(kl, config.kl_beta)

    kd = [k.item() for k in kd_terms] + [0.0] * (len(heads) - len(kd_terms))
    gt = [g.item() for g in gt_terms] + [0.0] * (len(heads) - len(gt_terms))
    return LossParts(loss, kd, gt, kl.item(), float(np.mean(h)))


def _total(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


@dataclass
class TrainResult:
    net: VelocityNet
    encoder: NoiseEncoder
    ema: EmaState
    status: str
    iterations: int
    metrics: list[MetricsRecord] = field(default_factory=list)
    message: str = ""


Sink = Callable[[MetricsRecord], None]


def build_models(config: TrainConfig, dim: int) -> tuple[VelocityNet, NoiseEncoder, EmaState]:
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    net = VelocityNet(dim, config.width, config.n_blocks, config.temb_dim,
                      n_heads=config.n_align, c_skip=config.c_skip,
                      epsilon=config.epsilon, rng=init_rng)
    enc = NoiseEncoder(dim, config.encoder_width, config.kl_beta, rng=init_rng)
    ema = EmaState(net, config.ema_decay, config.ema_start)
    return net, enc, ema


def _grads_finite(grads: dict) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def train(config: TrainConfig, data: np.ndarray, sinks: Iterable[Sink] = (),
          checkpoint_fn: Optional[Callable[[TrainResult], None]] = None) -> TrainResult:
    """Run ``config.total_iters`` optimizer steps on batches drawn from ``data``.

    A non-finite loss or gradient stops training with status ``"collapse"``
    and a final diagnostic record; otherwise the status is ``"ok"``.
    """
    config.validate()
    data = np.asarray(data, dtype=np.float64)
    sinks = list(sinks)
    net, enc, ema = build_models(config, data.shape[1])
    scheme = build_scheme(config.scheme)
    opt = Adam(net.parameters() + enc.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    result = TrainResult(net, enc, ema, "ok", 0)

    for i in range(config.total_iters):
        start = time.perf_counter()
        x0 = data[rng.integers(0, data.shape[0], size=config.batch_size)]
        try:
            with Tape() as tape:
                parts = cud_loss(net, enc, x0, config, rng, iteration=i, ema=ema, scheme=scheme)
            grads = tape.backward(parts.loss)
            if not _grads_finite(grads):
                raise T.NonFiniteError("non-finite gradient")
        except FloatingPointError as exc:
            result.status = "collapse"
            result.message = f"iteration {i}: {exc}"
            log.warning("training collapsed at iteration %d: %s", i, exc)
            nan = float("nan")
            diag = MetricsRecord(i, nan, [nan] * net.n_heads, [nan] * net.n_heads, nan, nan,
                                 (time.perf_counter() - start) * 1e3)
            result.metrics.append(diag)
            for sink in sinks:
                sink(diag)
            break
        opt.step(grads)
        ema.update(net, i)
        result.iterations = i + 1
        if i % config.log_every == 0 or i == config.total_iters - 1:
            rec = MetricsRecord(i, parts.loss.item(), parts.kd, parts.gt, parts.kl, parts.mean_h,
                                (time.perf_counter() - start) * 1e3)
            result.metrics.append(rec)
            for sink in sinks:
                sink(rec)
        if checkpoint_fn is not None and config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            checkpoint_fn(result)
    return result


@dataclass
class FitCostBin:
    t_low: float
    t_high: float
    mean_loss: float


def fit_cost_profile(net: VelocityNet, enc: NoiseEncoder, data: np.ndarray, n_bins: int = 10,
                     edges: Optional[Sequence[tuple[float, float]]] = None,
                     n_eval: int = 4096, seed: int = 0) -> list[FitCostBin]:
    """Ground-truth velocity MSE of head 1, averaged within time bins.

    The evaluation set (data rows, encoder noise) is fixed by ``seed`` and
    shared by every bin; only the times differ.
    """
    rng = np.random.default_rng(seed)
    data = np.asarray(data, dtype=np.float64)
    x0 = data[:n_eval] if data.shape[0] >= n_eval else data[rng.integers(0, data.shape[0], n_eval)]
    xi = rng.standard_normal(x0.shape)
    eps = net.epsilon
    if edges is None:
        grid = np.linspace(eps, 1.0, n_bins + 1)
        edges = list(zip(grid[:-1], grid[1:]))
    with T.no_grad():
        x1, _ = encode_noise(enc, x0, rng, xi=xi)
        target = x1.data - x0
        out = []
        for lo, hi in edges:
            t = rng.uniform(lo, hi, size=x0.shape[0])
            xt = t[:, None] * x1.data + (1.0 - t[:, None]) * x0
            v = net.velocity(xt, t)
            out.append(FitCostBin(float(lo), float(hi), float(np.mean((target - v) ** 2))))
    return out
