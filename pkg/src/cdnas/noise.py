"""The four perturbation scenarios applied to evaluation records.

Each perturbed set remembers, per surviving record, which clean record it
came from and whether its model inputs changed. Callers can therefore reuse
clean predictions and only recompute what a perturbation actually touched.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataset import ResponseLog, validate_qmatrix


class NoiseKind(str, Enum):
    LOG_MISS = "log_miss"
    EXERCISE_CONFUSION = "exercise_confusion"
    QMATRIX_CONFUSION = "qmatrix_confusion"
    LOG_FLIP = "log_flip"


SUITE_ORDER = (NoiseKind.LOG_MISS, NoiseKind.EXERCISE_CONFUSION, NoiseKind.QMATRIX_CONFUSION, NoiseKind.LOG_FLIP)


@dataclass(frozen=True)
class NoiseScenario:
    kind: NoiseKind
    ratio: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio {self.ratio} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class PerturbedSet:
    records: ResponseLog
    scenario: NoiseScenario
    q_override: np.ndarray | None
    source_index: np.ndarray  # clean-record index of every surviving record
    inputs_changed: np.ndarray  # True where (student, exercise) differs from the source record

    def __len__(self):
        return len(self.records)


def noise_count(ratio: float, n: int) -> int:
    """ceil(ratio * n), immune to float noise such as 0.7 * 10 = 7.000000000000001."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    return int(math.ceil(round(ratio * n, 9)))


def subseed(seed: int, kind) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{NoiseKind(kind).value}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _untouched(records: ResponseLog, scenario: NoiseScenario) -> PerturbedSet:
    n = len(records)
    return PerturbedSet(records, scenario, None, np.arange(n), np.zeros(n, dtype=bool))


def apply_log_miss(records: ResponseLog, ratio: float, seed: int) -> PerturbedSet:
    n = len(records)
    k = noise_count(ratio, n)
    if k >= n:
        raise ValueError(f"removing {k} of {n} records leaves nothing")
    scenario = NoiseScenario(NoiseKind.LOG_MISS, ratio, seed)
    drop = np.random.default_rng(seed).choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return PerturbedSet(records.take(keep), scenario, None, keep, np.zeros(keep.size, dtype=bool))


def apply_exercise_confusion(records: ResponseLog, ratio: float, n_exercises: int, seed: int) -> PerturbedSet:
    if n_exercises < 2:
        raise ValueError("exercise confusion needs at least two exercises")
    n = len(records)
    k = noise_count(ratio, n)
    scenario = NoiseScenario(NoiseKind.EXERCISE_CONFUSION, ratio, seed)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    draw = rng.integers(0, n_exercises - 1, size=k)
    exercise = records.exercise.copy()
    # uniform over the other M-1 ids: skip past the original one
    exercise[idx] = draw + (draw >= exercise[idx])
    changed = np.zeros(n, dtype=bool)
    changed[idx] = True
    return PerturbedSet(records.replace(exercise=exercise), scenario, None, np.arange(n), changed)


def apply_qmatrix_confusion(q, ratio: float, seed: int) -> np.ndarray:
    """Flip ceil(ratio*M*K) distinct entries; rows left empty get one flip undone."""
    q = np.asarray(q)
    m, k = q.shape
    count = noise_count(ratio, m * k)
    rng = np.random.default_rng(seed)
    flat = rng.choice(m * k, size=count, replace=False)
    out = q.astype(np.int8).copy()
    flipped = np.zeros((m, k), dtype=bool)
    flipped.flat[flat] = True
    out[flipped] = 1 - out[flipped]
    for row in np.flatnonzero(out.sum(axis=1) == 0):
        col = rng.choice(np.flatnonzero(flipped[row]))
        out[row, col] = 1
    return validate_qmatrix(out)


def apply_log_flip(records: ResponseLog, ratio: float, seed: int) -> PerturbedSet:
    n = len(records)
    k = noise_count(ratio, n)
    scenario = NoiseScenario(NoiseKind.LOG_FLIP, ratio, seed)
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    correct = records.correct.copy()
    correct[idx] = 1 - correct[idx]
    return PerturbedSet(records.replace(correct=correct), scenario, None, np.arange(n), np.zeros(n, dtype=bool))


def apply_scenario(kind, records: ResponseLog, q, ratio: float, seed: int) -> PerturbedSet:
    kind = NoiseKind(kind)
    if kind == NoiseKind.LOG_MISS:
        return apply_log_miss(records, ratio, seed)
    if kind == NoiseKind.EXERCISE_CONFUSION:
        return apply_exercise_confusion(records, ratio, np.asarray(q).shape[0], seed)
    if kind == NoiseKind.LOG_FLIP:
        return apply_log_flip(records, ratio, seed)
    base = _untouched(records, NoiseScenario(kind, ratio, seed))
    q_new = apply_qmatrix_confusion(q, ratio, seed)
    return PerturbedSet(base.records, base.scenario, q_new, base.source_index, base.inputs_changed)


def build_noise_suite(val_records: ResponseLog, q, ratio: float = 0.2, seed: int = 0) -> tuple[PerturbedSet, ...]:
    """One perturbed copy of the validation records per scenario kind."""
    return tuple(apply_scenario(kind, val_records, q, ratio, subseed(seed, kind)) for kind in SUITE_ORDER)
