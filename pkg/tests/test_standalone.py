import numpy as np
import pytest

from cdnas.dataset import ResponseLog, generate_synthetic, split_responses
from cdnas.genome import preset_genome
from cdnas.metrics import compute_auc
from cdnas.standalone import RetrainConfig, rank_fidelity, retrain, robustness_grid, train_standalone
from cdnas.supernet import SupernetConfig, train_supernet


class LookupModel:
    """Scores each record by a fixed per-(student, exercise) table."""

    def __init__(self, n_students, n_exercises, seed=0):
        self.table = np.random.default_rng(seed).random((n_students, n_exercises))

    def predict(self, records, q):
        base = self.table[records.student, records.exercise]
        return base + 1e-3 * np.asarray(q)[records.exercise].sum(axis=1)


def make_test_log(n=300, seed=0):
    rng = np.random.default_rng(seed)
    return ResponseLog(rng.integers(0, 20, n), rng.integers(0, 15, n), rng.integers(0, 2, n))


def test_grid_at_ratio_zero_is_all_zero():
    test = make_test_log()
    q = np.ones((15, 3), dtype=np.int8)
    grid = robustness_grid(LookupModel(20, 15), test, q, ratios=(0.0,), seed=0)
    assert len(grid.cells) == 4
    assert all(c.change_ratio == 0.0 for c in grid.cells)
    assert grid.avg_abs_change == 0.0


def test_full_flip_change_ratio():
    test = make_test_log()
    q = np.ones((15, 3), dtype=np.int8)
    model = LookupModel(20, 15)
    a = float(compute_auc(model.predict(test, q), test.correct))
    cell = robustness_grid(model, test, q, ratios=(1.0,), kinds=("log_flip",)).cell("log_flip", 1.0)
    assert cell.change_ratio == pytest.approx((1 - 2 * a) / a, abs=1e-12)


def test_grid_is_deterministic_and_complete():
    test = make_test_log()
    q = np.ones((15, 3), dtype=np.int8)
    q[::2, 1] = 0
    model = LookupModel(20, 15)
    a = robustness_grid(model, test, q, seed=4)
    b = robustness_grid(model, test, q, seed=4)
    assert a == b
    assert len(a.cells) == 16
    assert {(c.scenario, c.ratio) for c in a.cells} == {(k, r) for k in ("log_miss", "exercise_confusion",
                                                                       "qmatrix_confusion", "log_flip")
                                                       for r in (0.1, 0.2, 0.3, 0.5)}


def test_reused_predictions_match_full_recompute():
    test = make_test_log()
    q = np.ones((15, 3), dtype=np.int8)
    q[::3, 2] = 0
    model = LookupModel(20, 15)
    from cdnas.noise import apply_scenario, subseed

    grid = robustness_grid(model, test, q, ratios=(0.3,), seed=2)
    for cell in grid.cells:
        p = apply_scenario(cell.scenario, test, q, 0.3, subseed(2, cell.scenario))
        q_eff = q if p.q_override is None else p.q_override
        assert cell.auc_noisy == float(compute_auc(model.predict(p.records, q_eff), p.records.correct))


@pytest.fixture(scope="module")
def small():
    bundle = generate_synthetic(60, 30, 5, 30, seed=5)
    return bundle, split_responses(bundle, seed=5)


QUICK = RetrainConfig(epochs=6, patience=3, d=8, head_sizes=(16, 8), batch_size=64)


def test_retrain_restores_best_and_is_own_bank(small):
    bundle, splits = small
    model, report = retrain(preset_genome("min", 6), bundle, splits, QUICK)
    assert 1 <= model.best_epoch <= 6
    best = max(r["val_auc"] for r in model.history)
    val_auc = float(compute_auc(model.predict(splits.val, bundle.q), splits.val.correct))
    assert val_auc == pytest.approx(best, abs=1e-12)
    assert 0 <= report.auc <= 1
    ckpt = train_supernet(bundle, splits, SupernetConfig(d=8, epochs=1, head_sizes=(16, 8)))
    assert model.bank.fingerprint() != ckpt.fingerprint()
    assert set(model.bank.keys()) < set(ckpt.bank.keys())


def test_retrain_is_deterministic(small):
    bundle, splits = small
    a = train_standalone(preset_genome("mirt", 6), bundle, splits, QUICK)
    b = train_standalone(preset_genome("mirt", 6), bundle, splits, QUICK)
    assert a.bank.fingerprint() == b.bank.fingerprint()


def test_shuffled_labels_give_chance_auc(small):
    bundle, splits = small
    rng = np.random.default_rng(0)
    shuffled = type(splits)(splits.train.replace(correct=rng.permutation(splits.train.correct)), splits.val,
                            splits.test, splits.seed)
    _, report = retrain(preset_genome("min", 6), bundle, shuffled, QUICK)
    assert abs(report.auc - 0.5) < 0.15


def test_rank_fidelity_small(small):
    bundle, splits = small
    ckpt = train_supernet(bundle, splits, SupernetConfig(height=4, d=8, epochs=1, head_sizes=(16, 8)))
    cfg = RetrainConfig(epochs=3, patience=2, d=8, head_sizes=(16, 8), batch_size=64)
    rf = rank_fidelity(ckpt, bundle, splits, n_archs=4, config=cfg, seed=1)
    assert len(rf.pairs) == 4 and len(rf.rows()) == 4
    assert -1 <= rf.kendall_tau <= 1 or np.isnan(rf.kendall_tau)


def test_bad_retrain_config():
    with pytest.raises(ValueError):
        RetrainConfig(epochs=5, patience=5)
