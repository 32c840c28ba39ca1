"""Response logs, Q-matrices, filtering, splitting and a synthetic generator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class DataError(ValueError):
    pass


class ResponseRecord(NamedTuple):
    student_id: int
    exercise_id: int
    correct: int


def _frozen(a, dtype=np.int64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ResponseLog:
    """Column-oriented record collection (three aligned integer arrays)."""

    student: np.ndarray
    exercise: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        for name in ("student", "exercise", "correct"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not (len(self.student) == len(self.exercise) == len(self.correct)):
            raise DataError("record columns differ in length")
        if len(self.correct) and not np.all((self.correct == 0) | (self.correct == 1)):
            raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.correct)

    def __iter__(self) -> Iterator[ResponseRecord]:
        for s, e, c in zip(self.student.tolist(), self.exercise.tolist(), self.correct.tolist()):
            yield ResponseRecord(s, e, c)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResponseLog):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("student", "exercise", "correct"))

    def take(self, index) -> "ResponseLog":
        index = np.asarray(index, dtype=np.int64)
        return ResponseLog(self.student[index], self.exercise[index], self.correct[index])

    def replace(self, **columns) -> "ResponseLog":
        cols = {"student": self.student, "exercise": self.exercise, "correct": self.correct}
        cols.update(columns)
        return ResponseLog(**cols)

    @classmethod
    def from_records(cls, records: Sequence[tuple[int, int, int]]) -> "ResponseLog":
        arr = np.asarray(list(records), dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])


def validate_qmatrix(q) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 1:
        raise DataError("Q-matrix must be a non-empty 2-D array")
    if not np.all((q == 0) | (q == 1)):
        raise DataError("Q-matrix entries must be 0 or 1")
    empty = np.flatnonzero(q.sum(axis=1) == 0)
    if empty.size:
        raise DataError(f"exercise covers no concept (row {int(empty[0])})")
    return _frozen(q, np.int8)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    log: ResponseLog
    n_students: int
    n_exercises: int
    q: np.ndarray | None = None
    student_ids: tuple[str, ...] = ()
    exercise_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_students < 1 or self.n_exercises < 1:
            raise DataError("bundle needs at least one student and one exercise")
        log = self.log
        if len(log) and (log.student.min() < 0 or log.student.max() >= self.n_students
                         or log.exercise.min() < 0 or log.exercise.max() >= self.n_exercises):
            raise DataError("record index out of range")
        if not self.student_ids:
            object.__setattr__(self, "student_ids", tuple(str(i) for i in range(self.n_students)))
        if not self.exercise_ids:
            object.__setattr__(self, "exercise_ids", tuple(str(i) for i in range(self.n_exercises)))
        if self.q is not None:
            q = validate_qmatrix(self.q)
            if q.shape[0] != self.n_exercises:
                raise DataError(f"Q-matrix has {q.shape[0]} rows but responses cover {self.n_exercises} exercises")
            object.__setattr__(self, "q", q)

    @property
    def n_concepts(self) -> int:
        return 0 if self.q is None else int(self.q.shape[1])

    def with_q(self, q) -> "DatasetBundle":
        return DatasetBundle(self.log, self.n_students, self.n_exercises, q, self.student_ids, self.exercise_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        same_q = (self.q is None and other.q is None) or (
            self.q is not None and other.q is not None and np.array_equal(self.q, other.q))
        return (self.log == other.log and self.n_students == other.n_students
                and self.n_exercises == other.n_exercises and same_q
                and self.student_ids == other.student_ids and self.exercise_ids == other.exercise_ids)


@dataclass(frozen=True, eq=False)
class SplitBundle:
    train: ResponseLog
    val: ResponseLog
    test: ResponseLog
    seed: int
    indices: tuple[np.ndarray, np.ndarray, np.ndarray] = field(default=(), repr=False)


# ---------------------------------------------------------------- loading


def _ordered_ids(raw: list[str]) -> list[str]:
    unique = set(raw)
    try:
        return sorted(unique, key=int)
    except ValueError:
        return sorted(unique)


def _is_int(text: str) -> bool:
    try:
        int(text)
        return True
    except ValueError:
        return False


def load_responses(path, delimiter: str = ",") -> DatasetBundle:
    """Parse ``student,exercise,correct`` lines; an optional header is skipped.

    Raw ids are re-indexed densely in sorted order (numeric when every id is
    an integer); the raw ids are kept on the bundle for export.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [(i + 1, line.strip()) for i, line in enumerate(fh)]
    lines = [(n, line) for n, line in lines if line]
    if lines and not all(_is_int(f.strip()) for f in lines[0][1].split(delimiter)):
        lines = lines[1:]
    if not lines:
        raise DataError(f"{path}: no records")
    students, exercises, labels = [], [], []
    for n, line in lines:
        fields = [f.strip() for f in line.split(delimiter)]
        if len(fields) != 3:
            raise DataError(f"{path}:{n}: expected 3 fields, got {len(fields)}")
        if not _is_int(fields[2]):
            raise DataError(f"{path}:{n}: label {fields[2]!r} is not an integer")
        label = int(fields[2])
        if label not in (0, 1):
            raise DataError(f"{path}:{n}: label {label} outside {{0, 1}}")
        students.append(fields[0])
        exercises.append(fields[1])
        labels.append(label)
    sid = _ordered_ids(students)
    eid = _ordered_ids(exercises)
    s_map = {k: i for i, k in enumerate(sid)}
    e_map = {k: i for i, k in enumerate(eid)}
    log = ResponseLog([s_map[s] for s in students], [e_map[e] for e in exercises], labels)
    return DatasetBundle(log, len(sid), len(eid), None, tuple(sid), tuple(eid))


def load_qmatrix(path, n_exercises: int | None = None, delimiter: str = ",") -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(v) for v in line.split(delimiter)])
            except ValueError:
                raise DataError(f"{path}:{n}: non-integer Q-matrix entry") from None
            if any(v not in (0, 1) for v in rows[-1]):
                raise DataError(f"{path}:{n}: Q-matrix entries must be 0 or 1")
            if not any(rows[-1]):
                raise DataError(f"{path}:{n}: exercise covers no concept")
    if not rows:
        raise DataError(f"{path}: empty Q-matrix")
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: ragged Q-matrix rows")
    if n_exercises is not None and len(rows) != n_exercises:
        raise DataError(f"{path}: {len(rows)} Q-matrix rows but {n_exercises} exercises in the responses")
    return validate_qmatrix(rows)


def load_dataset(responses_path, qmatrix_path) -> DatasetBundle:
    bundle = load_responses(responses_path)
    return bundle.with_q(load_qmatrix(qmatrix_path, bundle.n_exercises))


def export_responses(bundle: DatasetBundle, path) -> None:
    sid, eid = bundle.student_ids, bundle.exercise_ids
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("student,exercise,correct\n")
        for s, e, c in bundle.log:
            fh.write(f"{sid[s]},{eid[e]},{c}\n")


def export_qmatrix(q, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(q):
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def export_log(log: ResponseLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("student,exercise,correct\n")
        for s, e, c in log:
            fh.write(f"{s},{e},{c}\n")


def load_log(path) -> ResponseLog:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return ResponseLog(data[:, 0], data[:, 1], data[:, 2])


def save_bundle(bundle: DatasetBundle, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    export_responses(bundle, os.path.join(directory, "responses.csv"))
    if bundle.q is not None:
        export_qmatrix(bundle.q, os.path.join(directory, "qmatrix.csv"))


# ---------------------------------------------------------------- filtering / splitting


def filter_sparse_students(bundle: DatasetBundle, min_records: int = 15) -> DatasetBundle:
    if min_records < 1:
        raise ValueError("min_records must be >= 1")
    counts = np.bincount(bundle.log.student, minlength=bundle.n_students)
    keep = np.flatnonzero(counts >= min_records)
    if keep.size == 0:
        raise DataError(f"no student has at least {min_records} records")
    remap = np.full(bundle.n_students, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    rows = np.flatnonzero(remap[bundle.log.student] >= 0)
    log = bundle.log.take(rows)
    log = log.replace(student=remap[log.student])
    ids = tuple(bundle.student_ids[i] for i in keep)
    return DatasetBundle(log, int(keep.size), bundle.n_exercises, bundle.q, ids, bundle.exercise_ids)


def split_responses(bundle, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitBundle:
    """Uniform record-level shuffle; floor sizes for train and val, remainder to test."""
    log = bundle.log if isinstance(bundle, DatasetBundle) else bundle
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)}, not 1")
    n = len(log)
    n_train = int(np.floor(ratios[0] * n + 1e-9))
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ValueError(f"{n} records cannot fill three non-empty splits")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:]))
    return SplitBundle(log.take(parts[0]), log.take(parts[1]), log.take(parts[2]), int(seed), parts)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True, eq=False)
class SyntheticLatents:
    theta: np.ndarray  # N x K abilities
    difficulty: np.ndarray  # M
    q: np.ndarray  # M x K


def sample_latents(n_students: int, n_exercises: int, n_concepts: int, rng) -> SyntheticLatents:
    theta = rng.standard_normal((n_students, n_concepts))
    difficulty = rng.standard_normal(n_exercises)
    q = np.zeros((n_exercises, n_concepts), dtype=np.int8)
    for j in range(n_exercises):
        k = int(rng.integers(1, min(3, n_concepts) + 1))
        q[j, rng.choice(n_concepts, size=k, replace=False)] = 1
    return SyntheticLatents(theta, difficulty, q)


def correct_probability(latents: SyntheticLatents, student, exercise) -> np.ndarray:
    """logistic(mean over the exercise's concepts of theta - b)."""
    q = latents.q[exercise].astype(np.float64)
    ability = (latents.theta[student] * q).sum(axis=1) / q.sum(axis=1)
    return 1.0 / (1.0 + np.exp(-(ability - latents.difficulty[exercise])))


def sample_responses(latents: SyntheticLatents, records_per_student: int, rng) -> ResponseLog:
    n_students = latents.theta.shape[0]
    n_exercises = latents.q.shape[0]
    students = np.repeat(np.arange(n_students), records_per_student)
    exercises = np.concatenate([rng.choice(n_exercises, size=records_per_student, replace=False)
                                for _ in range(n_students)])
    p = correct_probability(latents, students, exercises)
    labels = (rng.random(p.size) < p).astype(np.int64)
    return ResponseLog(students, exercises, labels)


def generate_synthetic(n_students: int = 200, n_exercises: int = 100, n_concepts: int = 10,
                       records_per_student: int = 50, seed: int = 0, return_latents: bool = False):
    for name, v in (("n_students", n_students), ("n_exercises", n_exercises), ("n_concepts", n_concepts),
                    ("records_per_student", records_per_student)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    if records_per_student > n_exercises:
        raise ValueError("records_per_student cannot exceed n_exercises")
    rng = np.random.default_rng(seed)
    latents = sample_latents(n_students, n_exercises, n_concepts, rng)
    log = sample_responses(latents, records_per_student, rng)
    bundle = DatasetBundle(log, n_students, n_exercises, latents.q)
    return (bundle, latents) if return_latents else bundle
