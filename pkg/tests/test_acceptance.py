"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

The desk-scale pipeline (criteria 6 to 10) is driven through the command line
into temporary directories and shared through a module fixture.
"""

import csv
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from cdnas.cli import main
from cdnas.dataset import ResponseLog
from cdnas.engine import Batch, Dims, check_preconditions, finite_difference_check, init_params
from cdnas.genome import StructuralCollapse, decode, preset_genome, random_genome
from cdnas.metrics import (
    compute_auc,
    evaluate_objectives,
    histogram_kl,
    kendall_tau,
    kl_divergence,
    spearman_rho,
)
from cdnas.noise import build_noise_suite
from cdnas.operators import Op, empirical_lipschitz, op_meta, pair_ratio
from cdnas.search import dominates, fast_nondominated_sort

DESK = ["--seed", "0", "--epochs", "30", "--pop", "40", "--generations", "40", "--noise-ratio", "0.2"]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


# ---------------------------------------------------------------- property criteria


def test_criterion_01_gradient_suite(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, done, skipped = 0.0, 0, 0
    while done < 100:
        height = int(rng.integers(2, 5))
        try:
            tree = decode(random_genome(height, rng))
        except StructuralCollapse:
            continue
        dims = Dims(6, 7, 3, 4, height, head_sizes=(8, 6))
        bank = init_params(dims, seed=int(rng.integers(1 << 30)))
        q = (rng.random((7, 3)) < 0.5).astype(np.int8)
        q[np.arange(7), rng.integers(0, 3, 7)] = 1
        batch = Batch(rng.integers(0, 6, 5), rng.integers(0, 7, 5), q)
        if not check_preconditions(tree, batch, bank.copy(np.longdouble)):
            skipped += 1
            continue
        labels = rng.integers(0, 2, 5)
        worst = max(worst, finite_difference_check(tree, batch, bank, labels, seed=done))
        done += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 60
    report(1, ok, f"max rel err {worst:.2e} (<= 1e-4) over {done} trees, {skipped} ill-conditioned draws "
                  f"skipped, {elapsed:.1f}s (<= 60s)")
    assert ok


def test_criterion_02_lipschitz_suite(report):
    d = 8
    rng = np.random.default_rng(7)
    weights = {Op.FFN: rng.normal(size=(d, 1)), Op.FFN_D: rng.normal(size=(d, d)),
               Op.CONCAT: rng.normal(size=(2 * d, d))}
    flagged = [op for op in Op if op_meta(op).lipschitz is True]
    worst_margin, failures = 0.0, []
    for op in flagged:
        est, bound = empirical_lipschitz(op, 10_000, (-10.0, 10.0), d=d, seed=int(op), weight=weights.get(op))
        worst_margin = max(worst_margin, est / bound)
        if est > bound * (1 + 1e-6):
            failures.append(op.name)
    witnesses = {
        Op.INV: pair_ratio(Op.INV, [0.0], [1e-4]),
        Op.SQRT: pair_ratio(Op.SQRT, [1e-9], [-1e-9]),
        Op.SQUARE: pair_ratio(Op.SQUARE, [60.0], [60.001]),
        Op.MUL: pair_ratio(Op.MUL, [100.0], [200.0], [100.001], [200.0]),
    }
    non_lipschitz = {op for op in Op if op_meta(op).lipschitz is False}
    weak = [op.name for op, r in witnesses.items() if not r > 100]
    ok = not failures and not weak and set(witnesses) == non_lipschitz
    report(2, ok, f"{len(flagged)} Lipschitz ops, max est/bound {worst_margin:.6f}; witnesses "
                  + ", ".join(f"{op.name}={r:.3g}" for op, r in witnesses.items()))
    assert ok


def test_criterion_03_repair_totality(report):
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    collapsed, mismatched = 0, 0
    for _ in range(100_000):
        g = random_genome(6, rng)
        try:
            a = decode(g)
        except StructuralCollapse:
            collapsed += 1
            try:
                decode(g)
            except StructuralCollapse:
                continue
            mismatched += 1
            continue
        if a.to_bytes() != decode(g).to_bytes():
            mismatched += 1
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and elapsed <= 120
    report(3, ok, f"1e5 genomes, {collapsed} collapses, {mismatched} non-deterministic, {elapsed:.1f}s (<= 120s)")
    assert ok


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if a > b else Fraction(1, 2) if a == b else Fraction(0) for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _brute_fronts(objs):
    left = set(range(len(objs)))
    out = []
    while left:
        front = sorted(i for i in left if not any(dominates(objs[j], objs[i]) for j in left if j != i))
        out.append(front)
        left -= set(front)
    return out


def _pair_counts(x, y):
    c = d = tx = ty = 0
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            sx = (x[i] > x[j]) - (x[i] < x[j])
            sy = (y[i] > y[j]) - (y[i] < y[j])
            if sx and sy:
                c, d = (c + 1, d) if sx == sy else (c, d + 1)
            elif sx:
                tx += 1
            elif sy:
                ty += 1
    return (c - d) / math.sqrt((c + d + tx) * (c + d + ty))


def _pair_rho(x, y):
    n = len(x)
    rx = [2 * sum(w < a for w in x) + sum(w == a for w in x) + 1 for a in x]
    ry = [2 * sum(w < a for w in y) + sum(w == a for w in y) + 1 for a in y]
    sxy = n * sum(a * b for a, b in zip(rx, ry)) - sum(rx) * sum(ry)
    return sxy / math.sqrt((n * sum(a * a for a in rx) - sum(rx) ** 2) * (n * sum(b * b for b in ry) - sum(ry) ** 2))


def test_criterion_04_oracle_equivalences(report):
    rng = np.random.default_rng(4)
    auc_err, sort_bad, corr_bad = 0.0, 0, 0
    for trial in range(300):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, int(rng.integers(2, 40)), n) / 7.0
        oracle = _brute_auc(scores.tolist(), labels.tolist())
        auc_err = max(auc_err, abs(compute_auc(scores, labels) - float(oracle)))
        if compute_auc(scores, labels, exact=True) != oracle:
            auc_err = math.inf
        m = int(rng.integers(1, 65))
        objs = rng.integers(0, int(rng.integers(2, 6)), (m, 3)).tolist()
        if [sorted(f) for f in fast_nondominated_sort(objs)] != _brute_fronts(objs):
            sort_bad += 1
        k = int(rng.integers(2, 51))
        x = rng.integers(0, 6, k).tolist()
        y = rng.integers(0, 6, k).tolist()
        x[0], x[1], y[0], y[1] = 0, 1, 1, 0
        if kendall_tau(x, y) != _pair_counts(x, y) or spearman_rho(x, y) != _pair_rho(x, y):
            corr_bad += 1
    ok = auc_err <= 1e-12 and sort_bad == 0 and corr_bad == 0
    report(4, ok, f"300 trials: AUC max err {auc_err:.1e} (<= 1e-12), sort mismatches {sort_bad}, "
                  f"rank-correlation mismatches {corr_bad}")
    assert ok


def test_criterion_05_metric_identities(report):
    rng = np.random.default_rng(5)
    flip_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 300))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 20, n) / 20
        if compute_auc(scores, 1 - labels, exact=True) != 1 - compute_auc(scores, labels, exact=True):
            flip_bad += 1
    self_kl, min_kl = 0.0, math.inf
    for _ in range(1000):
        p = rng.dirichlet(np.ones(20))
        r = rng.dirichlet(np.ones(20) * rng.uniform(0.1, 5))
        self_kl = max(self_kl, abs(kl_divergence(p, p)))
        min_kl = min(min_kl, kl_divergence(p, r))
    a, b = rng.random(400), rng.beta(2, 5, 300)
    self_kl = max(self_kl, abs(histogram_kl(a, a)))
    min_kl = min(min_kl, histogram_kl(a, b))
    val = ResponseLog(rng.integers(0, 10, 300), rng.integers(0, 8, 300), rng.integers(0, 2, 300))
    q = np.ones((8, 3), dtype=np.int8)
    suite = build_noise_suite(val, q, 0.2, seed=0)
    const = evaluate_objectives(lambda tree, rec, q: np.full(len(rec), 0.42), preset_genome("min", 6), val, q,
                                suite)
    ok = flip_bad == 0 and self_kl == 0.0 and min_kl >= 0 and tuple(const) == (0.5, 0.5, 0.0)
    report(5, ok, f"flip identity failures {flip_bad}; max KL(P||P) {self_kl}; min KL {min_kl:.3g} (>= 0); "
                  f"constant predictor {tuple(const)}")
    assert ok


# ---------------------------------------------------------------- desk pipeline


def _run(out, *commands, extra=()):
    for cmd in commands:
        code = main([cmd, "--out-dir", str(out), *DESK, *extra])
        if code != 0:
            raise RuntimeError(f"{cmd} exited with {code}")


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    a, b = root / "a", root / "b"
    start = time.perf_counter()
    _run(a, "gen-synthetic", "prepare", "train-supernet", "search")
    elapsed = time.perf_counter() - start
    _run(a, "retrain", "robustness", "rank-fidelity", "report")
    _run(b, "gen-synthetic", "prepare", "train-supernet", "search")
    return {"a": a, "b": b, "elapsed": elapsed}


def test_criterion_06_end_to_end_desk_run(desk, report):
    archive = json.loads((desk["a"] / "pareto.json").read_text())
    best = max(1 - e["objectives"]["g1"] for e in archive)
    retrained = json.loads((desk["a"] / "retrain_report.json").read_text())
    certified = max(r["val_auc"] for r in retrained["history"])
    ok = desk["elapsed"] <= 900 and certified >= 0.75 and best >= 0.75
    report(6, ok, f"pipeline {desk['elapsed']:.0f}s (<= 900s); archive best clean val AUC {best:.4f} (>= 0.75); "
                  f"retrained min preset best val AUC {certified:.4f} (certifies 0.75 if >= 0.75)")
    assert ok


def test_criterion_07_rank_fidelity(desk, report):
    summary = json.loads((desk["a"] / "rank_fidelity.json").read_text())
    with open(desk["a"] / "rank_fidelity.csv", newline="") as fh:
        n = sum(1 for _ in csv.DictReader(fh))
    tau = summary["kendall_tau"]
    ok = n == 20 and tau >= 0.4
    report(7, ok, f"Kendall tau {tau:.4f} (>= 0.4), Spearman {summary['spearman_rho']:.4f}, {n} architectures")
    assert ok


def test_criterion_08_robustness_trend(desk, report):
    with open(desk["a"] / "robustness_grid.csv", newline="") as fh:
        cells = {(r["scenario"], float(r["ratio"])): r for r in csv.DictReader(fh)}
    flip = cells[("log_flip", 0.5)]
    miss = cells[("log_miss", 0.5)]
    flip_change, miss_change = abs(float(flip["change_ratio"])), abs(float(miss["change_ratio"]))
    flip_auc = float(flip["auc_noisy"])
    ok = flip_change > miss_change and flip_auc < 0.6
    report(8, ok, f"|flip@0.5| {flip_change:.4f} > |miss@0.5| {miss_change:.4f}; flip@0.5 AUC {flip_auc:.4f} (< 0.6)")
    assert ok


def test_criterion_09_elitism(desk, report):
    bad = []
    for run in ("a", "b"):
        with open(desk[run] / "history.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for key in ("best_g1", "best_g2", "best_g3"):
            vals = [float(r[key]) for r in rows]
            bad += [(run, key, i) for i in range(1, len(vals)) if vals[i] > vals[i - 1]]
    ok = not bad
    report(9, ok, f"{len(rows)} logged generations per run, {len(bad)} per-objective regressions")
    assert ok


def test_criterion_10_reproducibility(desk, report):
    same = {name: (desk["a"] / name).read_bytes() == (desk["b"] / name).read_bytes()
            for name in ("pareto.json", "supernet.ckpt")}
    ok = all(same.values())
    report(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
