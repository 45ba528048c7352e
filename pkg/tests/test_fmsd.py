import numpy as np
import pytest

from catchup.fmsd import (FmsdConfig, TeacherPairSet, build_teacher_pairs, distill_stage, fmsd_run,
                          stage_loss)
from catchup.model import EmaState
from catchup.optim import Adam
from catchup.sampler import sample
from catchup.tensor import Tape

from conftest import ConstantField, small_net


def test_constant_teacher_gives_identical_stage_targets():
    v = np.array([0.4, -1.1])
    pairs = build_teacher_pairs(ConstantField(v), 10, rng=np.random.default_rng(0))
    for s in (8, 11, 14):
        assert np.allclose(pairs.clean[s], pairs.z1 - v, atol=1e-14)


def test_z1_recorded_as_drawn():
    pairs = build_teacher_pairs(ConstantField([0.0, 0.0]), 5, rng=np.random.default_rng(4))
    assert np.array_equal(pairs.z1, np.random.default_rng(4).standard_normal((5, 2)))


def test_empty_pair_set():
    pairs = build_teacher_pairs(small_net(), 0)
    assert len(pairs) == 0 and set(pairs.clean) == {8, 11, 14}


def test_bad_stage_rejected():
    with pytest.raises(ValueError):
        build_teacher_pairs(small_net(), 3, stages=(8, 17))


class PartlyBroken:
    dim, epsilon = 2, 1e-5

    def velocity(self, x, t):
        v = np.zeros_like(x)
        v[x[:, 0] > 1.5] = np.inf
        return v


def test_non_finite_rows_are_skipped_and_counted():
    z_rng = np.random.default_rng(0)
    pairs = build_teacher_pairs(PartlyBroken(), 200, rng=z_rng)
    expected_bad = int((np.random.default_rng(0).standard_normal((200, 2))[:, 0] > 1.5).sum())
    assert pairs.skipped == expected_bad > 0
    assert len(pairs) == 200 - expected_bad
    assert all(np.all(np.isfinite(c)) for c in pairs.clean.values())


def test_perfect_student_has_zero_loss_and_gradient():
    student = small_net()
    z1 = np.random.default_rng(1).standard_normal((16, 2))
    clean = z1 - student.velocity(z1, np.ones(16))
    with Tape() as tape:
        loss, fit, _ = stage_loss(student, z1, clean)
    grads = tape.backward(loss)
    assert fit < 1e-28
    assert max(np.abs(g).max() for g in grads.values()) < 1e-12


def test_sam_term_vanishes_for_identical_ema():
    student = small_net()
    ema = EmaState(student)
    z1 = np.random.default_rng(2).standard_normal((8, 2))
    _, _, sam = stage_loss(student, z1, np.zeros_like(z1), ema, sam=True)
    assert sam == 0.0


def test_sam_needs_ema():
    with pytest.raises(ValueError):
        stage_loss(small_net(), np.zeros((2, 2)), np.zeros((2, 2)), None, sam=True)


def test_missing_stage():
    pairs = TeacherPairSet(np.zeros((1, 2)), {8: np.zeros((1, 2))}, [8])
    with pytest.raises(KeyError):
        distill_stage(small_net(), pairs, 11, 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_stage():
    pairs = TeacherPairSet(np.zeros((2, 2)), {8: np.full((2, 2), 1e200)}, [8])
    with pytest.raises(FloatingPointError):
        distill_stage(small_net(), pairs, 8, 2)


def test_teacher_is_never_mutated():
    teacher = small_net(seed=3)
    snap = teacher.state_dict()
    fmsd_run(teacher, FmsdConfig(n_pairs=32, iters_per_stage=3, batch_size=8))
    assert all(np.array_equal(snap[k], v) for k, v in teacher.state_dict().items())


def test_zero_stages_returns_teacher_copy():
    teacher = small_net(seed=4)
    res = fmsd_run(teacher, FmsdConfig(stages=(), n_pairs=8))
    assert res.student is not teacher and res.reports == []
    assert all(np.array_equal(teacher.state_dict()[k], v) for k, v in res.student.state_dict().items())


def test_seeded_runs_are_bitwise_identical():
    cfg = FmsdConfig(n_pairs=32, iters_per_stage=4, batch_size=8, sam=True, seed=9)
    a = fmsd_run(small_net(seed=5), cfg).student.state_dict()
    b = fmsd_run(small_net(seed=5), cfg).student.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_converged_student_reproduces_final_clean_targets():
    teacher = small_net(seed=6)
    pairs = build_teacher_pairs(teacher, 6, stages=(14,), rng=np.random.default_rng(0))
    student = teacher.copy()
    opt = Adam(student.parameters(), lr=3e-3)
    distill_stage(student, pairs, 14, iters=3000, optimizer=opt, batch_size=6)
    one_step = sample(student, "euler", 1, z1=pairs.z1).final
    assert np.max(np.abs(one_step - pairs.clean[14])) < 1e-3
