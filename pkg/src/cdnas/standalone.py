"""Retraining from scratch, robustness grids and one-shot rank fidelity."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import DatasetBundle, ResponseLog, SplitBundle
from .engine import Batch, Dims, ParamBank, adam_step, backward, clip_gradients, forward, init_params, project_monotone
from .genome import ArchTree, Genome, StructuralCollapse, decode, random_genome
from .metrics import MetricReport, compute_auc, kendall_tau, metric_report, spearman_rho
from .noise import SUITE_ORDER, NoiseKind, apply_scenario, subseed
from .operators import NonFiniteError

log = logging.getLogger(__name__)

GRID_RATIOS = (0.1, 0.2, 0.3, 0.5)


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 100
    patience: int = 10
    lr: float = 0.001
    batch_size: int = 128
    seed: int = 0
    d: int = 128
    concept_mode: str = "project"
    head_sizes: tuple[int, ...] = (512, 256)
    grad_clip: float = 0.0
    monotone_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        if not 0 < self.patience < self.epochs:
            raise ValueError("patience must be positive and smaller than epochs")


@dataclass
class StandaloneModel:
    tree: ArchTree
    bank: ParamBank
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def predict(self, records: ResponseLog, q, chunk: int = 4096) -> np.ndarray:
        out = np.empty(len(records), dtype=np.float64)
        for start in range(0, len(records), chunk):
            stop = min(start + chunk, len(records))
            batch = Batch(records.student[start:stop], records.exercise[start:stop], np.asarray(q))
            out[start:stop] = forward(self.tree, batch, self.bank)
        return out


def _safe_auc(pred, labels) -> float:
    if not np.all(np.isfinite(pred)):
        return float("nan")
    return float(compute_auc(pred, labels))


def train_standalone(genome, bundle: DatasetBundle, splits: SplitBundle,
                     config: RetrainConfig = RetrainConfig()) -> StandaloneModel:
    """Fresh weights for just this tree; Adam on BCE with early stopping on val AUC.

    The best-validation weights are restored at the end.
    """
    tree = genome if isinstance(genome, ArchTree) else decode(genome)
    dims = Dims(bundle.n_students, bundle.n_exercises, bundle.n_concepts, config.d, tree.height,
                config.concept_mode, config.head_sizes)
    bank = init_params(dims, config.seed, op_keys=tree.param_keys())
    rng = np.random.default_rng(config.seed)
    q = np.asarray(bundle.q)
    train = splits.train
    model = StandaloneModel(tree, bank)
    best_auc, best_bank, since = -np.inf, bank.copy(), 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = Batch(train.student[idx], train.exercise[idx], q)
            loss, grads = backward(tree, batch, bank, train.correct[idx])
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteError(f"non-finite gradient in epoch {epoch}")
            if config.grad_clip > 0:
                clip_gradients(grads, config.grad_clip)
            adam_step(bank, grads, lr=config.lr)
            if config.monotone_head:
                project_monotone(bank)
            losses.append(loss)
        val_auc = _safe_auc(model.predict(splits.val, q), splits.val.correct)
        model.history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_auc": val_auc})
        if val_auc > best_auc:
            best_auc, best_bank, since = val_auc, bank.copy(), 0
            model.best_epoch = epoch
        else:
            since += 1
            if since >= config.patience:
                break
    model.bank = best_bank
    log.info("retrained %d epochs, best val AUC %.4f at epoch %d", len(model.history), best_auc, model.best_epoch)
    return model


def retrain(genome, bundle: DatasetBundle, splits: SplitBundle,
            config: RetrainConfig = RetrainConfig()) -> tuple[StandaloneModel, MetricReport]:
    model = train_standalone(genome, bundle, splits, config)
    pred = model.predict(splits.test, bundle.q)
    return model, metric_report(pred, splits.test.correct)


# ---------------------------------------------------------------- robustness


@dataclass(frozen=True)
class GridCell:
    scenario: str
    ratio: float
    auc_clean: float
    auc_noisy: float
    change_ratio: float


@dataclass(frozen=True)
class RobustnessGrid:
    cells: tuple[GridCell, ...]
    avg_abs_change: float

    def cell(self, scenario, ratio: float) -> GridCell:
        scenario = NoiseKind(scenario).value
        return next(c for c in self.cells if c.scenario == scenario and c.ratio == ratio)

    def rows(self) -> list[dict]:
        return [asdict(c) for c in self.cells]


def robustness_grid(model, test: ResponseLog, q, ratios=GRID_RATIOS, seed: int = 0, kinds=SUITE_ORDER) -> RobustnessGrid:
    """AUC change ratio (noisy - clean) / clean for every (scenario, ratio)."""
    q = np.asarray(q)
    clean_pred = model.predict(test, q)
    auc_clean = float(compute_auc(clean_pred, test.correct))
    cells = []
    for kind in kinds:
        kind = NoiseKind(kind)
        for ratio in ratios:
            perturbed = apply_scenario(kind, test, q, ratio, subseed(seed, kind))
            q_eff = q if perturbed.q_override is None else perturbed.q_override
            pred = clean_pred[perturbed.source_index].copy()
            redo = np.arange(len(perturbed)) if perturbed.q_override is not None else np.flatnonzero(perturbed.inputs_changed)
            if redo.size:
                pred[redo] = model.predict(perturbed.records.take(redo), q_eff)
            auc_noisy = float(compute_auc(pred, perturbed.records.correct))
            cells.append(GridCell(kind.value, float(ratio), auc_clean, auc_noisy, (auc_noisy - auc_clean) / auc_clean))
    avg = float(np.mean([abs(c.change_ratio) for c in cells])) if cells else 0.0
    return RobustnessGrid(tuple(cells), avg)


# ---------------------------------------------------------------- rank fidelity


@dataclass(frozen=True)
class RankFidelity:
    kendall_tau: float
    spearman_rho: float
    pairs: tuple[tuple[int, Genome, float, float], ...]  # (arch_id, genome, one-shot AUC, retrained AUC)

    def rows(self) -> list[dict]:
        return [{"arch_id": i, "oneshot_auc": a, "retrained_auc": b} for i, _, a, b in self.pairs]


def rank_fidelity(checkpoint, bundle: DatasetBundle, splits: SplitBundle, n_archs: int = 20,
                  config: RetrainConfig = RetrainConfig(), seed: int = 0, max_draws: int = 1000) -> RankFidelity:
    """Correlate one-shot val AUC with retrained val AUC over random genomes.

    Genomes that collapse, or whose one-shot or retrained scoring hits a
    non-finite value, are replaced by fresh draws.
    """
    rng = np.random.default_rng(seed)
    height = checkpoint.config.height
    q = np.asarray(bundle.q)
    pairs = []
    draws = 0
    while len(pairs) < n_archs and draws < max_draws:
        draws += 1
        genome = random_genome(height, rng)
        try:
            tree = decode(genome)
            oneshot = _safe_auc(checkpoint.predict(tree, splits.val, q), splits.val.correct)
            if not np.isfinite(oneshot):
                continue
            model = train_standalone(tree, bundle, splits, config)
            retrained = _safe_auc(model.predict(splits.val, q), splits.val.correct)
        except (StructuralCollapse, NonFiniteError):
            continue
        if not np.isfinite(retrained):
            continue
        pairs.append((len(pairs), genome, oneshot, retrained))
        log.info("rank fidelity arch %d: one-shot %.4f retrained %.4f", len(pairs) - 1, oneshot, retrained)
    if len(pairs) < 2:
        raise ValueError("fewer than two usable architectures")
    a = [p[2] for p in pairs]
    b = [p[3] for p in pairs]
    return RankFidelity(kendall_tau(a, b), spearman_rho(a, b), tuple(pairs))
