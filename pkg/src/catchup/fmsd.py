"""Final multi-step distillation toward one-step sampling.

A trained teacher is run with a 16-step Euler sampler; the clean-data
projections taken at a few intermediate steps become regression targets
for the student's velocity at ``t = 1``. Stages go from an early (weaker)
step to a late (stronger) one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .metrics import sliced_w2
from .model import EmaState, VelocityNet
from .optim import Adam
from .sampler import one_step_clean, sample
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TeacherPairSet:
    z1: np.ndarray
    clean: dict[int, np.ndarray]
    stages: list[int]
    n_steps: int = 16
    skipped: int = 0

    def __len__(self) -> int:
        return self.z1.shape[0]


def build_teacher_pairs(teacher, n_pairs: int, n_steps: int = 16,
                        stages: Sequence[int] = (8, 11, 14),
                        rng: Optional[np.random.Generator] = None,
                        dim: Optional[int] = None) -> TeacherPairSet:
    stages = [int(s) for s in stages]
    if any(not 0 <= s <= n_steps for s in stages):
        raise ValueError(f"stages {stages} must lie within 0..{n_steps}")
    dim = dim if dim is not None else teacher.dim
    if n_pairs == 0:
        return TeacherPairSet(np.zeros((0, dim)), {s: np.zeros((0, dim)) for s in stages},
                              stages, n_steps)
    rng = rng if rng is not None else np.random.default_rng(0)
    z1 = rng.standard_normal((n_pairs, dim))
    with np.errstate(all="ignore"):
        traj = _euler_unchecked(teacher, z1, n_steps)
    clean = {}
    ok = np.all(np.isfinite(traj[-1][1]), axis=1)
    for s in stages:
        t_s, z_s = traj[s]
        c = one_step_clean(np.nan_to_num(z_s), t_s, teacher)
        ok &= np.all(np.isfinite(z_s), axis=1) & np.all(np.isfinite(c), axis=1)
        clean[s] = c
    skipped = int((~ok).sum())
    if skipped:
        log.warning("skipping %d teacher pairs with non-finite trajectories", skipped)
    return TeacherPairSet(z1[ok], {s: c[ok] for s, c in clean.items()}, stages, n_steps, skipped)


def _euler_unchecked(teacher, z1: np.ndarray, n_steps: int):
    # sample() raises on any non-finite row; pair building drops rows instead
    try:
        return sample(teacher, "euler", n_steps, z1=z1).states
    except (FloatingPointError, T.NonFiniteError):
        from .sampler import as_velocity_fn, time_grid

        f = as_velocity_fn(teacher)
        grid = time_grid(n_steps, getattr(teacher, "epsilon", 1e-5))
        z = z1.copy()
        states = [(float(grid[0]), z.copy())]
        for k in range(n_steps):
            dt = grid[k] - grid[k + 1]
            good = np.all(np.isfinite(z), axis=1)
            v = np.full_like(z, np.nan)
            if good.any():
                v[good] = f(z[good], np.full(good.sum(), grid[k]))
            z = z - dt * v
            states.append((float(grid[k + 1]), z.copy()))
        return states


@dataclass
class FmsdConfig:
    stages: tuple[int, ...] = (8, 11, 14)
    n_steps: int = 16
    n_pairs: int = 4096
    iters_per_stage: int = 2000
    batch_size: int = 256
    learning_rate: float = 5e-4
    sam: bool = False
    sam_weight: float = 1.0
    ema_decay: float = 0.9999
    ema_start: int = 1
    seed: int = 0


def stage_loss(student: VelocityNet, z1: np.ndarray, clean: np.ndarray,
               ema: Optional[EmaState] = None, sam: bool = False,
               sam_weight: float = 1.0) -> tuple[Tensor, float, float]:
    """Velocity regression at t=1 toward ``z1 - clean``, plus the optional EMA term."""
    ones = np.ones(z1.shape[0])
    pred = student(Tensor(z1), ones, n_out=1)[0]
    fit = T.mse(pred, Tensor(z1 - clean))
    loss = fit
    sam_val = 0.0
    if sam:
        if ema is None:
            raise ValueError("sam alignment needs an EMA state")
        target = ema.model.velocity(z1, ones)
        sam_term = T.mse(pred, Tensor(target))
        sam_val = sam_term.item()
        loss = loss + T.scale(sam_term, sam_weight)
    return loss, fit.item(), sam_val


def distill_stage(student: VelocityNet, pairs: TeacherPairSet, stage: int, iters: int,
                  sam: bool = False, ema: Optional[EmaState] = None,
                  optimizer: Optional[Adam] = None, batch_size: int = 256,
                  rng: Optional[np.random.Generator] = None, sam_weight: float = 1.0,
                  step_offset: int = 0) -> list[float]:
    """Fit the student's t=1 velocity to one stage's clean targets; returns losses."""
    if stage not in pairs.clean:
        raise KeyError(f"no teacher targets recorded for stage {stage}")
    if len(pairs) == 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    optimizer = optimizer or Adam(student.parameters(), lr=5e-4)
    clean = pairs.clean[stage]
    losses = []
    for i in range(iters):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        with Tape() as tape:
            loss, fit, _ = stage_loss(student, pairs.z1[idx], clean[idx], ema, sam, sam_weight)
        if not np.isfinite(loss.item()):
            raise T.NonFiniteError(f"stage {stage}: non-finite loss at iteration {i}")
        grads = tape.backward(loss)
        optimizer.step(grads)
        if ema is not None:
            ema.update(student, step_offset + i)
        losses.append(loss.item())
    return losses


@dataclass
class StageReport:
    stage: int
    final_loss: float
    one_step_sliced_w2: Optional[float]


@dataclass
class FmsdResult:
    student: VelocityNet
    ema: EmaState
    pairs: TeacherPairSet
    reports: list[StageReport] = field(default_factory=list)
    initial_sliced_w2: Optional[float] = None


def one_step_quality(net: VelocityNet, reference: np.ndarray, n: int = 4096,
                     seed: int = 4321, n_projections: int = 128) -> float:
    """Sliced W2 of 1-step Euler samples from fixed noise (fixed metric seed)."""
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal((n, net.dim))
    x = sample(net, "euler", 1, z1=z1).final
    return sliced_w2(x, reference, n_projections, rng)


def fmsd_run(teacher: VelocityNet, config: FmsdConfig,
             reference: Optional[np.ndarray] = None) -> FmsdResult:
    """Build teacher pairs once, then distill each stage in order.

    The teacher is copied, never modified. With ``reference`` data the
    1-step sliced W2 is reported before distillation and after each stage.
    """
    ss = np.random.SeedSequence(config.seed)
    pair_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    student = teacher.copy()
    ema = EmaState(student, config.ema_decay, config.ema_start)
    pairs = build_teacher_pairs(teacher, config.n_pairs, config.n_steps, config.stages, pair_rng)
    opt = Adam(student.parameters(), lr=config.learning_rate)
    result = FmsdResult(student, ema, pairs)
    if reference is not None:
        result.initial_sliced_w2 = one_step_quality(student, reference)
    step = 0
    for stage in config.stages:
        losses = distill_stage(student, pairs, stage, config.iters_per_stage, config.sam, ema,
                               opt, config.batch_size, train_rng, config.sam_weight, step)
        step += config.iters_per_stage
        q = one_step_quality(student, reference) if reference is not None else None
        final = losses[-1] if losses else 0.0
        log.info("fmsd stage %d: loss %.5f one-step sliced-W2 %s", stage, final, q)
        result.reports.append(StageReport(stage, final, q))
    return result
