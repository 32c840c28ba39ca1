"""Weight-sharing supernet: sandwich training, one-shot prediction, checkpoints.

Checkpoint container (all integers little-endian)::

    magic    8 bytes  b"CDNASCK\\0"
    version  uint32
    hlen     uint32   length of the JSON header
    header   hlen bytes, UTF-8 JSON (config, dims, id maps, history, block list)
    blocks   per header["blocks"] entry: uint64 byte length + float32 data
    sha256   32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dataset import DatasetBundle, ResponseLog, SplitBundle
from .engine import Batch, Dims, ParamBank, adam_step, backward, clip_gradients, forward, init_params, project_monotone
from .genome import ArchTree, Genome, StructuralCollapse, decode, preset_genome, random_genome
from .operators import NonFiniteError

log = logging.getLogger(__name__)

MAGIC = b"CDNASCK\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, genome: Genome | None = None):
        super().__init__(message)
        self.genome = genome


@dataclass(frozen=True)
class SupernetConfig:
    height: int = 6
    d: int = 128
    batch_size: int = 128
    epochs: int = 30
    lr: float = 0.001
    n_random_subnets: int = 3
    seed: int = 0
    concept_mode: str = "project"
    head_sizes: tuple[int, ...] = (512, 256)
    grad_clip: float = 0.0  # per-subnet global norm; 0 disables
    monotone_head: bool = False
    max_resample: int = 100

    def __post_init__(self):
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        if self.height < 2 or self.d < 1 or self.batch_size < 1 or self.epochs < 0 or self.n_random_subnets < 0:
            raise ValueError(f"invalid supernet config: {self}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["head_sizes"] = list(self.head_sizes)
        return out


@dataclass
class Checkpoint:
    config: SupernetConfig
    bank: ParamBank
    history: list[dict] = field(default_factory=list)
    student_ids: tuple[str, ...] = ()
    exercise_ids: tuple[str, ...] = ()

    @property
    def dims(self) -> Dims:
        return self.bank.dims

    def predict(self, genome, records: ResponseLog, q, chunk: int = 2048) -> np.ndarray:
        return predict_with_subnet(self, genome, records, q, chunk)

    def fingerprint(self) -> str:
        return self.bank.fingerprint()


def _tree(genome) -> ArchTree:
    if isinstance(genome, ArchTree):
        return genome
    return decode(genome)


def predict_with_subnet(checkpoint, genome, records: ResponseLog, q, chunk: int = 2048) -> np.ndarray:
    """Forward every record through the subnet; a pure read of the bank."""
    bank = checkpoint.bank if isinstance(checkpoint, Checkpoint) else checkpoint
    tree = _tree(genome)
    q = np.asarray(q)
    out = np.empty(len(records), dtype=np.float64)
    for start in range(0, len(records), chunk):
        stop = min(start + chunk, len(records))
        batch = Batch(records.student[start:stop], records.exercise[start:stop], q)
        out[start:stop] = forward(tree, batch, bank)
    return out


def _finite(grads: dict) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def _accumulate(total: dict, grads: dict) -> None:
    for k, g in grads.items():
        if k in total:
            total[k] += g
        else:
            total[k] = g.copy()


def dims_for(bundle: DatasetBundle, config: SupernetConfig) -> Dims:
    return Dims(bundle.n_students, bundle.n_exercises, bundle.n_concepts, config.d, config.height,
                config.concept_mode, config.head_sizes)


def train_supernet(bundle: DatasetBundle, splits: SplitBundle, config: SupernetConfig = SupernetConfig(),
                   on_batch: Callable[[int, list[Genome]], None] | None = None) -> Checkpoint:
    """Sandwich training: every batch trains the min preset, the max preset and
    ``n_random_subnets`` fresh random subnets; their gradients are summed and
    applied in one Adam step.

    A random subnet that collapses or produces a non-finite value is replaced
    by a fresh draw; the presets failing aborts training.
    """
    train = splits.train
    if len(train) == 0:
        raise ValueError("empty training split")
    if bundle.q is None:
        raise ValueError("bundle has no Q-matrix")
    dims = dims_for(bundle, config)
    bank = init_params(dims, config.seed)
    rng = np.random.default_rng(config.seed)
    q = np.asarray(bundle.q)
    fixed = [preset_genome("min", config.height), preset_genome("max", config.height)]
    fixed_trees = [decode(g) for g in fixed]
    history = []
    batch_index = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train))
        losses, fixed_losses, resampled = [], [[], []], 0
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = Batch(train.student[idx], train.exercise[idx], q)
            labels = train.correct[idx]
            total: dict[str, np.ndarray] = {}
            used = []
            for j, (g, tree) in enumerate(zip(fixed, fixed_trees)):
                try:
                    loss, grads = backward(tree, batch, bank, labels)
                except NonFiniteError as exc:
                    raise TrainingError(f"preset subnet failed: {exc}", g) from exc
                if not _finite(grads):
                    raise TrainingError("preset subnet produced non-finite gradients", g)
                if config.grad_clip > 0:
                    clip_gradients(grads, config.grad_clip)
                _accumulate(total, grads)
                losses.append(loss)
                fixed_losses[j].append(loss)
                used.append(g)
            for _ in range(config.n_random_subnets):
                for attempt in range(config.max_resample + 1):
                    g = random_genome(config.height, rng)
                    try:
                        loss, grads = backward(decode(g), batch, bank, labels)
                    except (StructuralCollapse, NonFiniteError):
                        resampled += 1
                        continue
                    if np.isfinite(loss) and _finite(grads):
                        break
                    resampled += 1
                else:
                    raise TrainingError(f"no usable random subnet after {config.max_resample} draws", g)
                if config.grad_clip > 0:
                    clip_gradients(grads, config.grad_clip)
                _accumulate(total, grads)
                losses.append(loss)
                used.append(g)
            adam_step(bank, total, lr=config.lr)
            if config.monotone_head:
                project_monotone(bank)
            if on_batch is not None:
                on_batch(batch_index, used)
            batch_index += 1
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "loss_min": float(np.mean(fixed_losses[0])),
            "loss_max": float(np.mean(fixed_losses[1])),
            "resampled": resampled,
        }
        history.append(row)
        log.info("supernet epoch %d loss %.4f (min %.4f, max %.4f)", epoch, row["loss"], row["loss_min"], row["loss_max"])
    return Checkpoint(config, bank, history, bundle.student_ids, bundle.exercise_ids)


# ---------------------------------------------------------------- persistence


def _blocks(bank: ParamBank) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", a) for k, a in bank.arrays.items()]
    out += [(f"m/{k}", bank.m[k]) for k in bank.arrays if k in bank.m]
    out += [(f"v/{k}", bank.v[k]) for k in bank.arrays if k in bank.v]
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blocks = _blocks(ckpt.bank)
    header = {
        "config": ckpt.config.to_dict(),
        "dims": ckpt.dims.to_dict(),
        "history": ckpt.history,
        "student_ids": list(ckpt.student_ids),
        "exercise_ids": list(ckpt.exercise_ids),
        "steps": {k: ckpt.bank.steps[k] for k in ckpt.bank.arrays if k in ckpt.bank.steps},
        "blocks": [[name, list(a.shape)] for name, a in blocks],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for _, a in blocks:
        data = np.ascontiguousarray(a, dtype="<f4").tobytes()
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a supernet checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < 32 or hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt file)")
    pos = len(MAGIC) + 8
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for name, shape in header["blocks"]:
        (n,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        a = np.frombuffer(body[pos:pos + n], dtype="<f4").astype(np.float32).reshape(shape)
        pos += n
        kind, key = name.split("/", 1)
        arrays[kind][key] = a
    if pos != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    cfg = dict(header["config"])
    cfg["head_sizes"] = tuple(cfg["head_sizes"])
    bank = ParamBank(Dims.from_dict(header["dims"]), arrays["param"])
    bank.m = arrays["m"]
    bank.v = arrays["v"]
    bank.steps = {k: int(v) for k, v in header["steps"].items()}
    return Checkpoint(SupernetConfig(**cfg), bank, header["history"], tuple(header["student_ids"]),
                      tuple(header["exercise_ids"]))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
