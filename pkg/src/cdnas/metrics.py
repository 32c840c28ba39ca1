"""Classification metrics, binned KL divergence and the search objectives."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .genome import Leaf, StructuralCollapse, decode
from .operators import NonFiniteError

COLLAPSE_KL = 1e6


class MetricReport(NamedTuple):
    auc: float
    acc: float
    rmse: float


class ObjectiveVector(NamedTuple):
    g1: float
    g2: float
    g3: float


WORST = ObjectiveVector(1.0, 1.0, COLLAPSE_KL)


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)


def compute_auc(predictions, labels, exact: bool = False):
    """Mann-Whitney AUC with average ranks for ties.

    The statistic is accumulated as an integer (ranks doubled), so
    ``exact=True`` returns the AUC as a Fraction with no rounding at all.
    """
    s = np.asarray(predictions, dtype=np.float64)
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s.size]
    # doubled average rank of a tie group spanning 1-based ranks start+1..end
    doubled = np.repeat(starts + ends + 1, ends - starts)
    rank2 = int(doubled[y[order] == 1].sum())
    u2 = rank2 - n_pos * (n_pos + 1)
    if exact:
        return Fraction(u2, 2 * n_pos * n_neg)
    return u2 / (2 * n_pos * n_neg)


def compute_acc_rmse(predictions, labels, threshold: float = 0.5) -> tuple[float, float]:
    p = np.asarray(predictions, dtype=np.float64)
    y = _binary_labels(labels)
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    acc = float(np.mean((p >= threshold).astype(np.int64) == y))
    rmse = float(np.sqrt(np.mean((p - y) ** 2)))
    return acc, rmse


def metric_report(predictions, labels) -> MetricReport:
    acc, rmse = compute_acc_rmse(predictions, labels)
    return MetricReport(float(compute_auc(predictions, labels)), acc, rmse)


def smoothed_histogram(values, bins: int = 20, smoothing: float = 1e-6) -> np.ndarray:
    """Equal-width histogram over [0, 1], additively smoothed and normalised."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty input")
    counts, _ = np.histogram(np.clip(v, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return (counts / v.size + smoothing) / (1.0 + bins * smoothing)


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log(p / q)))


def histogram_kl(p_clean, p_noisy, bins: int = 20, smoothing: float = 1e-6) -> float:
    """KL(clean || noisy) between binned prediction distributions."""
    kl = kl_divergence(smoothed_histogram(p_clean, bins, smoothing), smoothed_histogram(p_noisy, bins, smoothing))
    return max(kl, 0.0)


def objectives_from_predictions(clean_pred, clean_labels, scenario_results: Sequence[tuple[np.ndarray, np.ndarray]],
                                bins: int = 20, smoothing: float = 1e-6, aggregate: str = "mean") -> ObjectiveVector:
    """Assemble (1 - AUC_clean, 1 - agg AUC_noisy, mean KL) from raw predictions."""
    if not scenario_results:
        raise ValueError("need at least one noise scenario")
    aucs = [float(compute_auc(p, y)) for p, y in scenario_results]
    if aggregate == "mean":
        noisy = sum(aucs) / len(aucs)
    elif aggregate == "worst":
        noisy = min(aucs)
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    kls = [histogram_kl(clean_pred, p, bins, smoothing) for p, _ in scenario_results]
    return ObjectiveVector(1.0 - float(compute_auc(clean_pred, clean_labels)), 1.0 - noisy, sum(kls) / len(kls))


PredictFn = Callable[[object, object, np.ndarray], np.ndarray]


def scenario_predictions(predict: PredictFn, tree, clean_records, q, clean_pred: np.ndarray, perturbed) -> np.ndarray:
    """Predictions on a perturbed set, recomputing only records whose inputs changed."""
    if perturbed.q_override is not None:
        if tree.uses_leaf(Leaf.HC):
            return predict(tree, perturbed.records, perturbed.q_override)
        return clean_pred[perturbed.source_index]
    pred = clean_pred[perturbed.source_index].copy()
    changed = np.flatnonzero(perturbed.inputs_changed)
    if changed.size:
        pred[changed] = predict(tree, perturbed.records.take(changed), q)
    return pred


def evaluate_objectives(predict: PredictFn, genome, clean_val, q, noise_suite, bins: int = 20,
                        smoothing: float = 1e-6, aggregate: str = "mean") -> ObjectiveVector:
    """One-shot objective vector of ``genome``.

    ``predict(tree, records, q)`` must return probabilities. Collapsed or
    numerically broken genomes get the worst vector (1, 1, 1e6).
    """
    try:
        tree = decode(genome) if not hasattr(genome, "active") else genome
        clean_pred = predict(tree, clean_val, q)
        results = [(scenario_predictions(predict, tree, clean_val, q, clean_pred, s), s.records.correct)
                   for s in noise_suite]
    except (StructuralCollapse, NonFiniteError):
        return WORST
    if not (np.all(np.isfinite(clean_pred)) and all(np.all(np.isfinite(p)) for p, _ in results)):
        return WORST
    return objectives_from_predictions(clean_pred, clean_val.correct, results, bins, smoothing, aggregate)


# ---------------------------------------------------------------- rank correlation


def _doubled_ranks(x) -> np.ndarray:
    """Average ranks times two (integers), ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], x.size]
    out = np.empty(x.size, dtype=np.int64)
    out[order] = np.repeat(starts + ends + 1, ends - starts)
    return out


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("need two score lists of equal length")
    if x.size < 2:
        raise ValueError("need at least two items")
    return x, y


def kendall_tau(x, y) -> float:
    """Kendall tau-b with the usual tie correction; nan if either list is constant."""
    x, y = _check_pair(x, y)
    sx = np.sign(x[:, None] - x[None, :]).astype(np.int64)
    sy = np.sign(y[:, None] - y[None, :]).astype(np.int64)
    upper = np.triu(np.ones_like(sx, dtype=bool), 1)
    prod = (sx * sy)[upper]
    conc_minus_disc = int(prod.sum())
    untied_x = int(np.count_nonzero(sx[upper]))
    untied_y = int(np.count_nonzero(sy[upper]))
    denom = math.sqrt(untied_x * untied_y)
    return conc_minus_disc / denom if denom else math.nan


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks; nan if either list is constant."""
    x, y = _check_pair(x, y)
    rx = [int(v) for v in _doubled_ranks(x)]
    ry = [int(v) for v in _doubled_ranks(y)]
    n = len(rx)
    sxy = n * sum(a * b for a, b in zip(rx, ry)) - sum(rx) * sum(ry)
    sxx = n * sum(a * a for a in rx) - sum(rx) ** 2
    syy = n * sum(b * b for b in ry) - sum(ry) ** 2
    denom = math.sqrt(sxx * syy)
    return sxy / denom if denom else math.nan
