"""Command-line pipeline: data generation through search, retraining and reports.

Exit codes: 0 success, 1 usage or configuration error (including a missing
prerequisite artifact), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

log = logging.getLogger("cdnas")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    # data
    responses: str = ""
    qmatrix: str = ""
    n_students: int = 200
    n_exercises: int = 100
    n_concepts: int = 10
    records_per_student: int = 50
    min_records: int = 15
    split_train: float = 0.7
    split_val: float = 0.1
    split_test: float = 0.2
    # supernet
    height: int = 6
    d: int = 128
    batch_size: int = 128
    epochs: int = 30
    lr: float = 0.001
    n_random_subnets: int = 3
    concept_mode: str = "project"
    grad_clip: float = 0.0
    monotone_head: bool = False
    # search
    pop: int = 100
    generations: int = 100
    crossover_prob: float = 0.9
    mutation_prob: float = 1.0
    noise_ratio: float = 0.2
    aggregate: str = "mean"
    bins: int = 20
    smoothing: float = 1e-6
    # standalone
    genome: str = "min"
    retrain_epochs: int = 100
    patience: int = 10
    grid_ratios: str = "0.1,0.2,0.3,0.5"
    rank_archs: int = 20

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, text, source: str):
    kind = FIELD_TYPES[key]
    if not isinstance(text, str):
        text = str(text)
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text.strip())
    except ValueError:
        raise UsageError(f"{source}: {key} expects {kind.__name__}, got {text!r}") from None


def parse_config_text(text: str, source: str = "config") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise UsageError(f"{source}:{n}: unknown config key {key!r}")
        values[key] = _coerce(key, value, f"{source}:{n}")
    return values


def load_config(path=None, overrides: dict | None = None) -> tuple[RunConfig, dict[str, str]]:
    """Resolve flags > file > defaults; returns the config and each key's source."""
    values = RunConfig().to_dict()
    sources = {k: "default" for k in values}
    if path:
        with open(path, encoding="utf-8") as fh:
            for k, v in parse_config_text(fh.read(), str(path)).items():
                values[k] = v
                sources[k] = "file"
    for k, v in (overrides or {}).items():
        if k not in FIELD_TYPES:
            raise UsageError(f"unknown config key {k!r}")
        values[k] = _coerce(k, v, "flag")
        sources[k] = "flag"
    cfg = RunConfig(**values)
    for k in values:
        log.debug("config %s = %r (%s)", k, values[k], sources[k])
    return cfg, sources


# ---------------------------------------------------------------- artifacts

DATA_DIR = "data"
PREP_DIR = "prepared"
CHECKPOINT = "supernet.ckpt"


def _path(cfg: RunConfig, *parts) -> str:
    return os.path.join(cfg.out_dir, *parts)


def _require(cfg: RunConfig, rel: str, producer: str) -> str:
    p = _path(cfg, rel)
    if not os.path.exists(p):
        raise UsageError(f"missing prerequisite {p}; run '{producer}' first")
    return p


def _sha(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(cfg: RunConfig, sources: dict, command: str, artifacts: list[str]) -> None:
    path = _path(cfg, "manifest.json")
    manifest = {"commands": {}}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    manifest["commands"][command] = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sources": dict(sorted(sources.items())),
        "artifacts": {os.path.relpath(a, cfg.out_dir): _sha(a) for a in sorted(artifacts)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_prepared(cfg: RunConfig):
    from .dataset import SplitBundle, load_dataset, load_log

    prep = _require(cfg, PREP_DIR, "prepare")
    bundle = load_dataset(os.path.join(prep, "responses.csv"), os.path.join(prep, "qmatrix.csv"))
    parts = [load_log(os.path.join(prep, f"{name}.csv")) for name in ("train", "val", "test")]
    return bundle, SplitBundle(*parts, cfg.seed)


def _supernet_config(cfg: RunConfig):
    from .supernet import SupernetConfig

    return SupernetConfig(height=cfg.height, d=cfg.d, batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr,
                          n_random_subnets=cfg.n_random_subnets, seed=cfg.seed, concept_mode=cfg.concept_mode,
                          grad_clip=cfg.grad_clip, monotone_head=cfg.monotone_head)


def _retrain_config(cfg: RunConfig):
    from .standalone import RetrainConfig

    return RetrainConfig(epochs=cfg.retrain_epochs, patience=cfg.patience, lr=cfg.lr, batch_size=cfg.batch_size,
                         seed=cfg.seed, d=cfg.d, concept_mode=cfg.concept_mode, grad_clip=cfg.grad_clip,
                         monotone_head=cfg.monotone_head)


def _genome(cfg: RunConfig):
    from .genome import genome_from_any

    try:
        return genome_from_any(cfg.genome, cfg.height)
    except ValueError as exc:
        raise UsageError(f"bad genome {cfg.genome!r}: {exc}") from None


def _write_json(path: str, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _write_csv(path: str, rows: list[dict], cols: list[str]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(cfg: RunConfig) -> list[str]:
    from .dataset import generate_synthetic, save_bundle

    bundle = generate_synthetic(cfg.n_students, cfg.n_exercises, cfg.n_concepts, cfg.records_per_student, cfg.seed)
    save_bundle(bundle, _path(cfg, DATA_DIR))
    log.info("synthetic bundle: %d records", len(bundle.log))
    return [_path(cfg, DATA_DIR, "responses.csv"), _path(cfg, DATA_DIR, "qmatrix.csv")]


def cmd_prepare(cfg: RunConfig) -> list[str]:
    from .dataset import export_log, filter_sparse_students, load_dataset, save_bundle, split_responses

    responses = cfg.responses or _require(cfg, os.path.join(DATA_DIR, "responses.csv"), "gen-synthetic")
    qmatrix = cfg.qmatrix or _require(cfg, os.path.join(DATA_DIR, "qmatrix.csv"), "gen-synthetic")
    bundle = filter_sparse_students(load_dataset(responses, qmatrix), cfg.min_records)
    splits = split_responses(bundle, (cfg.split_train, cfg.split_val, cfg.split_test), cfg.seed)
    prep = _path(cfg, PREP_DIR)
    save_bundle(bundle, prep)
    out = [os.path.join(prep, "responses.csv"), os.path.join(prep, "qmatrix.csv")]
    for name in ("train", "val", "test"):
        export_log(getattr(splits, name), os.path.join(prep, f"{name}.csv"))
        out.append(os.path.join(prep, f"{name}.csv"))
    log.info("prepared %d students, splits %d/%d/%d", bundle.n_students, len(splits.train), len(splits.val),
             len(splits.test))
    return out


def cmd_train_supernet(cfg: RunConfig) -> list[str]:
    from .supernet import save_checkpoint, train_supernet

    bundle, splits = _load_prepared(cfg)
    ckpt = train_supernet(bundle, splits, _supernet_config(cfg))
    path = _path(cfg, CHECKPOINT)
    save_checkpoint(ckpt, path)
    hist = _path(cfg, "supernet_history.csv")
    _write_csv(hist, ckpt.history, ["epoch", "loss", "loss_min", "loss_max", "resampled"])
    return [path, hist]


def cmd_search(cfg: RunConfig) -> list[str]:
    from .search import SearchConfig, export_history, export_pareto, run_search
    from .supernet import load_checkpoint

    ckpt_path = _require(cfg, CHECKPOINT, "train-supernet")
    bundle, splits = _load_prepared(cfg)
    ckpt = load_checkpoint(ckpt_path)
    scfg = SearchConfig(pop=cfg.pop, generations=cfg.generations, crossover_prob=cfg.crossover_prob,
                        mutation_prob=cfg.mutation_prob, seed=cfg.seed, noise_ratio=cfg.noise_ratio,
                        aggregate=cfg.aggregate, bins=cfg.bins, smoothing=cfg.smoothing)
    result = run_search(ckpt, splits.val, bundle.q, scfg)
    out = [_path(cfg, "pareto.json"), _path(cfg, "pareto.csv"), _path(cfg, "history.csv")]
    export_pareto(result.archive, out[0], out[1])
    export_history(result.history, out[2])
    best = min(e.objectives.g1 for e in result.archive)
    log.info("archive of %d, best clean val AUC %.4f", len(result.archive), 1 - best)
    return out


def cmd_retrain(cfg: RunConfig) -> list[str]:
    from .genome import decode, pretty_print
    from .standalone import retrain

    bundle, splits = _load_prepared(cfg)
    genome = _genome(cfg)
    model, report = retrain(genome, bundle, splits, _retrain_config(cfg))
    path = _path(cfg, "retrain_report.json")
    _write_json(path, {"genome": genome.to_dict(), "formula": pretty_print(decode(genome)),
                       "test": dict(report._asdict()), "best_epoch": model.best_epoch, "history": model.history})
    return [path]


def cmd_robustness(cfg: RunConfig) -> list[str]:
    from .standalone import robustness_grid, train_standalone

    bundle, splits = _load_prepared(cfg)
    try:
        ratios = tuple(float(r) for r in cfg.grid_ratios.split(","))
    except ValueError:
        raise UsageError(f"grid_ratios must be comma-separated numbers, got {cfg.grid_ratios!r}") from None
    model = train_standalone(_genome(cfg), bundle, splits, _retrain_config(cfg))
    grid = robustness_grid(model, splits.test, bundle.q, ratios, cfg.seed)
    path = _path(cfg, "robustness_grid.csv")
    _write_csv(path, grid.rows(), ["scenario", "ratio", "auc_clean", "auc_noisy", "change_ratio"])
    summary = _path(cfg, "robustness_summary.json")
    _write_json(summary, {"avg_abs_change": grid.avg_abs_change})
    return [path, summary]


def cmd_rank_fidelity(cfg: RunConfig) -> list[str]:
    from .standalone import rank_fidelity
    from .supernet import load_checkpoint

    ckpt_path = _require(cfg, CHECKPOINT, "train-supernet")
    bundle, splits = _load_prepared(cfg)
    result = rank_fidelity(load_checkpoint(ckpt_path), bundle, splits, cfg.rank_archs, _retrain_config(cfg), cfg.seed)
    path = _path(cfg, "rank_fidelity.csv")
    _write_csv(path, result.rows(), ["arch_id", "oneshot_auc", "retrained_auc"])
    summary = _path(cfg, "rank_fidelity.json")
    _write_json(summary, {"kendall_tau": result.kendall_tau, "spearman_rho": result.spearman_rho})
    return [path, summary]


def cmd_report(cfg: RunConfig) -> list[str]:
    from .search import load_pareto

    archive = load_pareto(_require(cfg, "pareto.json", "search"))
    hist_path = _require(cfg, "history.csv", "search")
    with open(hist_path, encoding="utf-8") as fh:
        history = fh.read().strip().splitlines()
    lines = ["# Search report", "", f"Archive size: {len(archive)}", "",
             "| # | 1-g1 (AUC) | g2 | g3 | Lipschitz fraction | formula |", "|---|---|---|---|---|---|"]
    for i, e in enumerate(sorted(archive, key=lambda e: e.objectives)):
        o = e.objectives
        lines.append(f"| {i} | {1 - o.g1:.4f} | {o.g2:.4f} | {o.g3:.4g} | {e.lipschitz_fraction:.2f} | `{e.formula}` |")
    lines += ["", f"Generations logged: {len(history) - 1}", "", "```", *history, "```", ""]
    path = _path(cfg, "report.md")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    print("\n".join(lines[:6 + len(archive)]))
    return [path]


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "prepare": cmd_prepare,
    "train-supernet": cmd_train_supernet,
    "search": cmd_search,
    "retrain": cmd_retrain,
    "robustness": cmd_robustness,
    "rank-fidelity": cmd_rank_fidelity,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdnas", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline step")
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    for name, kind in FIELD_TYPES.items():
        parser.add_argument("--" + name.replace("_", "-"), dest=f"opt_{name}", default=None, metavar=kind.__name__.upper())
    return parser


def run_command(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        for name in FIELD_TYPES:
            value = getattr(args, f"opt_{name}")
            if value is not None:
                overrides[name] = value
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg, sources = load_config(args.config, overrides)
    except UsageError as exc:
        print(f"cdnas: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cdnas: error: cannot read config: {exc}", file=sys.stderr)
        return 1
    for k, src in sources.items():
        if src != "default":
            log.info("config %s = %r (%s)", k, getattr(cfg, k), src)
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        artifacts = COMMANDS[args.command](cfg)
        _write_manifest(cfg, sources, args.command, artifacts)
    except UsageError as exc:
        print(f"cdnas: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"cdnas: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)
