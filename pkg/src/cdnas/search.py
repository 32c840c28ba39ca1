"""NSGA-II over genomes with one-shot evaluation against a frozen supernet."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .genome import (
    PRESET_NAMES,
    Genome,
    StructuralCollapse,
    crossover_single_point,
    decode,
    lipschitz_fraction,
    mutate_single_locus,
    preset_genome,
    pretty_print,
    random_genome,
)
from .metrics import WORST, ObjectiveVector, evaluate_objectives
from .noise import build_noise_suite

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    pop: int = 100
    generations: int = 100
    crossover_prob: float = 0.9
    mutation_prob: float = 1.0
    seed: int = 0
    noise_ratio: float = 0.2
    presets: tuple[str, ...] = PRESET_NAMES
    aggregate: str = "mean"
    bins: int = 20
    smoothing: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "presets", tuple(self.presets))
        if self.pop < 2 or self.pop % 2:
            raise ValueError("pop must be an even number >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")


@dataclass
class Individual:
    genome: Genome
    objectives: ObjectiveVector | None = None
    rank: int | None = None
    crowding: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.objectives is not None


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(objectives: Sequence[Sequence[float]]) -> list[list[int]]:
    """Fronts as lists of indices (ascending within each front)."""
    objs = np.asarray(objectives, dtype=np.float64)
    n = len(objs)
    if n == 0:
        return []
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=2)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in np.flatnonzero(dom[i]):
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(front: Sequence[Sequence[float]]) -> np.ndarray:
    objs = np.asarray(front, dtype=np.float64)
    n = len(objs)
    if n == 0:
        raise ValueError("empty front")
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, math.inf)
    for m in range(objs.shape[1]):
        order = np.argsort(objs[:, m], kind="mergesort")
        col = objs[order, m]
        span = col[-1] - col[0]
        if span <= 0:  # all tied: no meaningful boundary on this axis
            continue
        dist[order[0]] = dist[order[-1]] = math.inf
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def assign_rank_and_crowding(population: list[Individual]) -> list[list[int]]:
    fronts = fast_nondominated_sort([ind.objectives for ind in population])
    for r, front in enumerate(fronts):
        cd = crowding_distance([population[i].objectives for i in front])
        for i, c in zip(front, cd):
            population[i].rank = r
            population[i].crowding = float(c)
    return fronts


def _better(a: Individual, b: Individual) -> bool:
    if a.rank != b.rank:
        return a.rank < b.rank
    return a.crowding > b.crowding


def binary_tournament(population: Sequence[Individual], rng) -> Individual:
    """Lower rank wins, then larger crowding, then the first drawn."""
    i, j = rng.integers(0, len(population), size=2)
    a, b = population[i], population[j]
    for ind in (a, b):
        if ind.rank is None or ind.crowding is None:
            raise ValueError("tournament needs ranked individuals")
    return b if _better(b, a) else a


def environmental_select(combined: list[Individual], pop_size: int) -> list[Individual]:
    """Fill by whole fronts; cut the last one by descending crowding (stable)."""
    if len(combined) != 2 * pop_size:
        raise ValueError(f"expected {2 * pop_size} individuals, got {len(combined)}")
    if not all(ind.evaluated for ind in combined):
        raise ValueError("all individuals must be evaluated")
    fronts = assign_rank_and_crowding(combined)
    chosen: list[int] = []
    for front in fronts:
        if len(chosen) + len(front) <= pop_size:
            chosen += front
            continue
        order = sorted(front, key=lambda i: -combined[i].crowding)
        chosen += order[:pop_size - len(chosen)]
        break
    return [combined[i] for i in chosen]


def init_population(config: SearchConfig, height: int, rng=None) -> list[Individual]:
    if config.pop < len(config.presets):
        raise ValueError(f"pop {config.pop} smaller than the {len(config.presets)} presets")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    genomes = [preset_genome(name, height) for name in config.presets]
    genomes += [random_genome(height, rng) for _ in range(config.pop - len(genomes))]
    return [Individual(g) for g in genomes]


class Evaluator:
    """Objective vectors against a frozen checkpoint, cached by genome bytes."""

    def __init__(self, checkpoint, val_records, q, noise_suite, config: SearchConfig):
        self.checkpoint = checkpoint
        self.val = val_records
        self.q = np.asarray(q)
        self.suite = noise_suite
        self.config = config
        self.cache: dict[bytes, ObjectiveVector] = {}
        self.hits = 0

    def __call__(self, genome: Genome) -> ObjectiveVector:
        key = genome.key()
        if key in self.cache:
            self.hits += 1
            return self.cache[key]
        cfg = self.config
        value = evaluate_objectives(self.checkpoint.predict, genome, self.val, self.q, self.suite,
                                    cfg.bins, cfg.smoothing, cfg.aggregate)
        self.cache[key] = value
        return value


@dataclass(frozen=True)
class ArchiveEntry:
    genome: Genome
    formula: str
    formula_positioned: str
    objectives: ObjectiveVector
    lipschitz_fraction: float

    def to_dict(self) -> dict:
        return {
            "genome": self.genome.to_dict(),
            "formula": self.formula,
            "formula_positioned": self.formula_positioned,
            "objectives": dict(self.objectives._asdict()),
            "lipschitz_fraction": self.lipschitz_fraction,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchiveEntry":
        o = data["objectives"]
        return cls(Genome.from_dict(data["genome"]), data["formula"], data["formula_positioned"],
                   ObjectiveVector(o["g1"], o["g2"], o["g3"]), float(data["lipschitz_fraction"]))


@dataclass
class SearchResult:
    archive: list[ArchiveEntry]
    history: list[dict]
    population: list[Individual] = field(default_factory=list)


def pareto_archive(population: Sequence[Individual]) -> list[ArchiveEntry]:
    """Non-dominated, non-collapsed members, first occurrence of each genome kept."""
    live = [ind for ind in population if ind.objectives != WORST]
    if not live:
        return []
    front = fast_nondominated_sort([ind.objectives for ind in live])[0]
    seen = set()
    out = []
    for i in front:
        ind = live[i]
        key = ind.genome.key()
        if key in seen:
            continue
        seen.add(key)
        tree = decode(ind.genome)
        out.append(ArchiveEntry(ind.genome, pretty_print(tree), pretty_print(tree, positions=True),
                                ind.objectives, lipschitz_fraction(tree)))
    return out


def _history_row(generation: int, population: Sequence[Individual], front0: int) -> dict:
    objs = np.array([ind.objectives for ind in population])
    return {"generation": generation, "best_g1": float(objs[:, 0].min()), "best_g2": float(objs[:, 1].min()),
            "best_g3": float(objs[:, 2].min()), "front0_size": int(front0)}


def run_search(checkpoint, val_records, q, config: SearchConfig = SearchConfig(),
               suite_builder: Callable = build_noise_suite,
               on_generation: Callable[[dict], None] | None = None) -> SearchResult:
    """NSGA-II main loop; the whole run is a function of (checkpoint, data, config)."""
    rng = np.random.default_rng(config.seed)
    suite = suite_builder(val_records, q, config.noise_ratio, config.seed)
    evaluate = Evaluator(checkpoint, val_records, q, suite, config)
    height = checkpoint.config.height
    population = init_population(config, height, rng)
    for ind in population:
        ind.objectives = evaluate(ind.genome)
    fronts = assign_rank_and_crowding(population)
    history = [_history_row(0, population, len(fronts[0]))]
    for gen in range(1, config.generations + 1):
        offspring = []
        while len(offspring) < config.pop:
            p1 = binary_tournament(population, rng)
            p2 = binary_tournament(population, rng)
            if rng.random() < config.crossover_prob:
                c1, c2 = crossover_single_point(p1.genome, p2.genome, rng)
            else:
                c1, c2 = p1.genome, p2.genome
            for child in (c1, c2):
                if rng.random() < config.mutation_prob:
                    child = mutate_single_locus(child, rng)
                offspring.append(Individual(child))
        for ind in offspring:
            ind.objectives = evaluate(ind.genome)
        population = environmental_select(population + offspring, config.pop)
        fronts = assign_rank_and_crowding(population)
        row = _history_row(gen, population, len(fronts[0]))
        history.append(row)
        log.info("generation %d best g1 %.4f g2 %.4f g3 %.4g front0 %d", gen, row["best_g1"], row["best_g2"],
                 row["best_g3"], row["front0_size"])
        if on_generation is not None:
            on_generation(row)
    return SearchResult(pareto_archive(population), history, population)


# ---------------------------------------------------------------- export


def export_pareto(archive: Sequence[ArchiveEntry], json_path, csv_path=None) -> None:
    if not archive:
        raise ValueError("empty archive")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump([e.to_dict() for e in archive], fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "g1", "g2", "g3", "lipschitz_fraction", "formula"])
            for i, e in enumerate(archive):
                w.writerow([i, repr(e.objectives.g1), repr(e.objectives.g2), repr(e.objectives.g3),
                            repr(e.lipschitz_fraction), e.formula])


def load_pareto(json_path) -> list[ArchiveEntry]:
    with open(json_path, encoding="utf-8") as fh:
        return [ArchiveEntry.from_dict(d) for d in json.load(fh)]


def export_history(history: Sequence[dict], csv_path) -> None:
    cols = ["generation", "best_g1", "best_g2", "best_g3", "front0_size"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
