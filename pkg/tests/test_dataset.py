import numpy as np
import pytest

from cdnas.dataset import (
    DataError,
    DatasetBundle,
    ResponseLog,
    correct_probability,
    export_qmatrix,
    export_responses,
    filter_sparse_students,
    generate_synthetic,
    load_dataset,
    load_qmatrix,
    load_responses,
    sample_latents,
    sample_responses,
    split_responses,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_two_lines(tmp_path):
    b = load_responses(write(tmp_path, "r.csv", "1,2,1\n1,3,0\n"))
    assert len(b.log) == 2 and b.n_students == 1 and b.n_exercises == 2
    assert list(b.log) == [(0, 0, 1), (0, 1, 0)]


def test_header_is_skipped(tmp_path):
    b = load_responses(write(tmp_path, "r.csv", "student,exercise,correct\n7,2,1\n"))
    assert b.student_ids == ("7",)


def test_numeric_ids_sort_numerically(tmp_path):
    b = load_responses(write(tmp_path, "r.csv", "10,1,1\n9,1,0\n"))
    assert b.student_ids == ("9", "10")
    assert b.log.student.tolist() == [1, 0]


def test_label_domain_error(tmp_path):
    with pytest.raises(DataError, match="label"):
        load_responses(write(tmp_path, "r.csv", "1,2,2\n"))


def test_parse_error_names_line(tmp_path):
    with pytest.raises(DataError, match=":2:"):
        load_responses(write(tmp_path, "r.csv", "1,2,1\n1,2\n"))


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="no records"):
        load_responses(write(tmp_path, "r.csv", ""))


def test_qmatrix_examples(tmp_path):
    q = load_qmatrix(write(tmp_path, "q.csv", "1,0\n0,1\n"))
    assert q.tolist() == [[1, 0], [0, 1]]
    with pytest.raises(DataError, match="covers no concept"):
        load_qmatrix(write(tmp_path, "q2.csv", "1,0\n0,0\n"))
    with pytest.raises(DataError):
        load_qmatrix(write(tmp_path, "q3.csv", "1,2\n"))
    with pytest.raises(DataError, match="rows"):
        load_qmatrix(write(tmp_path, "q4.csv", "1,0\n0,1\n"), n_exercises=3)


def test_round_trip(tmp_path):
    b = generate_synthetic(12, 9, 4, 5, seed=3)
    export_responses(b, tmp_path / "r.csv")
    export_qmatrix(b.q, tmp_path / "q.csv")
    again = load_dataset(tmp_path / "r.csv", tmp_path / "q.csv")
    assert again == b
    export_responses(again, tmp_path / "r2.csv")
    assert (tmp_path / "r.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()


def test_filter_threshold():
    log = ResponseLog([0] * 14 + [1] * 15, [0] * 29, [1] * 29)
    b = DatasetBundle(log, n_students=2, n_exercises=1, q=[[1]], student_ids=("a", "b"))
    out = filter_sparse_students(b, 15)
    assert out.n_students == 1 and out.student_ids == ("b",)
    assert np.all(out.log.student == 0) and len(out.log) == 15
    single = DatasetBundle(ResponseLog([0] * 20, [0] * 20, [0] * 20), 1, 1, [[1]])
    assert filter_sparse_students(single, 15) == single
    with pytest.raises(DataError):
        filter_sparse_students(b, 16)


def test_split_sizes_and_partition():
    log = ResponseLog(np.arange(10), np.zeros(10), np.ones(10))
    b = DatasetBundle(log, 10, 1, [[1]])
    s = split_responses(b, (0.7, 0.1, 0.2), seed=1)
    assert (len(s.train), len(s.val), len(s.test)) == (7, 1, 2)
    ids = np.concatenate([s.train.student, s.val.student, s.test.student])
    assert sorted(ids.tolist()) == list(range(10))
    t = split_responses(b, (0.7, 0.1, 0.2), seed=1)
    assert s.train == t.train and s.val == t.val and s.test == t.test
    with pytest.raises(ValueError):
        split_responses(b, (0.5, 0.5, 0.5), seed=1)


def test_split_exact_cover_larger():
    b = generate_synthetic(30, 20, 5, 10, seed=0)
    s = split_responses(b, (0.7, 0.1, 0.2), seed=9)
    idx = np.concatenate(s.indices)
    assert sorted(idx.tolist()) == list(range(len(b.log)))


def test_synthetic_determinism_and_size():
    a = generate_synthetic(200, 100, 10, 50, seed=4)
    b = generate_synthetic(200, 100, 10, 50, seed=4)
    assert a == b
    assert len(a.log) == 10_000
    assert np.all(a.q.sum(axis=1) >= 1) and np.all(a.q.sum(axis=1) <= 3)
    with pytest.raises(ValueError):
        generate_synthetic(5, 4, 2, 6, seed=0)


def test_strong_student_is_almost_always_right():
    # theta >= b + 4 on every concept -> p >= logistic(4) ~ 0.982
    rng = np.random.default_rng(0)
    lat = sample_latents(1, 2000, 5, rng)
    lat.theta[:] = lat.difficulty.max() + 4
    log = sample_responses(lat, 2000, rng)
    assert log.correct.mean() >= 0.95
    assert np.all(correct_probability(lat, log.student, log.exercise) >= 1 / (1 + np.exp(-4)) - 1e-12)
