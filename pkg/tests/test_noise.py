import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdnas.dataset import ResponseLog
from cdnas.metrics import compute_auc
from cdnas.noise import (
    NoiseKind,
    apply_exercise_confusion,
    apply_log_flip,
    apply_log_miss,
    apply_qmatrix_confusion,
    build_noise_suite,
    noise_count,
    subseed,
)


def make_log(n, n_exercises=10, seed=0):
    rng = np.random.default_rng(seed)
    return ResponseLog(rng.integers(0, 20, n), rng.integers(0, n_exercises, n), rng.integers(0, 2, n))


def test_noise_count_is_ceiling():
    assert noise_count(0.5, 100) == 50
    assert noise_count(0.25, 4) == 1
    assert noise_count(0.7, 10) == 7  # 0.7*10 is 7.000000000000001 in floating point
    assert noise_count(0.21, 10) == 3
    assert noise_count(0.0, 10) == 0


def test_log_miss():
    log = make_log(100)
    out = apply_log_miss(log, 0.5, seed=1)
    assert len(out.records) == 50
    assert np.all(np.diff(out.source_index) > 0)
    assert out.records == log.take(out.source_index)
    assert apply_log_miss(log, 0.0, 1).records == log
    with pytest.raises(ValueError):
        apply_log_miss(log, 1.0, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.floats(0, 1), st.integers(2, 30), st.integers(0, 2**31))
def test_exercise_confusion_counts_and_locality(n, ratio, m, seed):
    log = make_log(n, m, seed % 1000)
    out = apply_exercise_confusion(log, ratio, m, seed)
    changed = out.records.exercise != log.exercise
    assert changed.sum() == math.ceil(round(ratio * n, 9))
    assert np.array_equal(changed, out.inputs_changed)
    assert np.array_equal(out.records.student, log.student)
    assert np.array_equal(out.records.correct, log.correct)
    assert np.all((out.records.exercise >= 0) & (out.records.exercise < m))


def test_exercise_confusion_needs_two_exercises():
    with pytest.raises(ValueError):
        apply_exercise_confusion(make_log(5, 1), 0.5, 1, 0)
    log = make_log(30)
    assert apply_exercise_confusion(log, 0.0, 10, 0).records == log


def test_qmatrix_confusion_small_example():
    q = np.ones((2, 2), dtype=np.int8)
    out = apply_qmatrix_confusion(q, 0.25, seed=0)
    assert (out != q).sum() == 1
    assert np.array_equal(apply_qmatrix_confusion(q, 0.0, 0), q)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.floats(0, 1), st.integers(0, 2**31))
def test_qmatrix_confusion_keeps_rows_non_empty(m, k, ratio, seed):
    rng = np.random.default_rng(seed)
    q = (rng.random((m, k)) < 0.5).astype(np.int8)
    q[np.arange(m), rng.integers(0, k, m)] = 1
    out = apply_qmatrix_confusion(q, ratio, seed)
    assert np.all(out.sum(axis=1) >= 1)
    flipped = (out != q).sum()
    target = math.ceil(round(ratio * m * k, 9))
    repaired_rows = m  # at most one undo per row
    assert target - repaired_rows <= flipped <= target


def test_qmatrix_confusion_exact_when_no_row_empties():
    q = np.ones((20, 6), dtype=np.int8)
    out = apply_qmatrix_confusion(q, 0.3, seed=5)
    assert (out != q).sum() == 36


def test_log_flip():
    log = make_log(50)
    out = apply_log_flip(log, 1.0, 3)
    assert np.array_equal(out.records.correct, 1 - log.correct)
    again = apply_log_flip(out.records, 1.0, 3)
    assert again.records == log
    assert apply_log_flip(log, 0.0, 3).records == log
    part = apply_log_flip(log, 0.3, 3)
    assert (part.records.correct != log.correct).sum() == 15


def test_suite():
    log = make_log(100)
    q = np.ones((10, 3), dtype=np.int8)
    suite = build_noise_suite(log, q, 0.2, seed=8)
    assert len(suite) == 4
    assert [s.scenario.kind for s in suite] == list(NoiseKind)
    assert [s.q_override is not None for s in suite] == [False, False, True, False]
    again = build_noise_suite(log, q, 0.2, seed=8)
    for a, b in zip(suite, again):
        assert a.records == b.records
    assert len({s.scenario.seed for s in suite}) == 4
    assert subseed(8, "log_miss") == suite[0].scenario.seed


def test_full_flip_complements_auc():
    rng = np.random.default_rng(0)
    log = make_log(80)
    p = rng.random(80)
    flipped = apply_log_flip(log, 1.0, 0).records
    assert compute_auc(p, flipped.correct, exact=True) == 1 - compute_auc(p, log.correct, exact=True)
