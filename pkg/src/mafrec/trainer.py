"""Mini-batch training with Adam, best-by-validation retention and checkpoints.

Checkpoint layout (little-endian)::

    magic     8 bytes  b"MAFRECKP"
    version   uint32
    header    uint64 length + UTF-8 JSON (config, epoch, best metric, adam
              hyper-parameters and step, RNG state)
    tensors   uint32 count, then per tensor:
              uint16 name length, name, uint8 ndim, uint64 dims, float64 data
    digest    32-byte SHA-256 of everything above

RNG draw order: parameter init (in ``param_shapes`` order), then per epoch
one permutation of the training examples, then per batch the dropout masks
in forward order.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import os
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .adam import AdamState, adam_step
from .config import TrainConfig
from .data import Corpus, SplitSpec
from .evaluator import MetricsReport, evaluate
from .model import ModelScorer, batch_from_ids, init_params, loss_and_grads, make_batch

log = logging.getLogger(__name__)

MAGIC = b"MAFRECKP"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    adam: AdamState
    epoch: int = 0
    best_metric: float | None = None
    rng_state: dict[str, Any] = field(default_factory=dict)

    def scorer(self, corpus: Corpus) -> ModelScorer:
        return ModelScorer(self.params, self.config, corpus)


@dataclass
class EpochLog:
    epoch: int
    loss_id: float
    loss_v: float
    loss_t: float
    loss_c: float
    val_recall10: float

    def line(self) -> str:
        return "\t".join([str(self.epoch)] + [repr(float(x)) for x in
                         (self.loss_id, self.loss_v, self.loss_t, self.loss_c, self.val_recall10)])


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list[EpochLog]


# ---------------------------------------------------------------------------
# checkpoint io


def _header(ckpt: Checkpoint) -> dict[str, Any]:
    return {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "step": ckpt.adam.step},
        "rng_state": ckpt.rng_state,
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = [(k, v) for k, v in ckpt.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = blob[:-32], blob[-32:]
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (truncated or corrupt file)")
    try:
        pos = len(MAGIC) + 4
        (hlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        header = json.loads(body[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            tensors[name] = arr.astype(np.float64)
        if pos != len(body):
            raise CheckpointError("trailing bytes after tensor blocks")
    except (struct.error, ValueError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    a = header["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    adam.m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    adam.v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return Checkpoint(params, TrainConfig.from_dict(header["config"]), adam,
                      header["epoch"], header["best_metric"], header["rng_state"])


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training


def training_arrays(split: SplitSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    from .data import window

    pairs = split.train_pairs()
    if not pairs:
        raise ValueError("split has no training pairs")
    ids = np.stack([window(hist, n) for _, hist, _ in pairs])
    targets = np.array([t for _, _, t in pairs], dtype=np.int64)
    return ids, targets


def _snapshot(params, config, adam, epoch, best, rng) -> Checkpoint:
    return Checkpoint({k: v.copy() for k, v in params.items()}, config, copy.deepcopy(adam),
                      epoch, best, copy.deepcopy(rng.bit_generator.state))


def validation_recall(params, config: TrainConfig, corpus: Corpus, split: SplitSpec) -> float:
    report = evaluate(ModelScorer(params, config, corpus), corpus, split, "validation", (10,), config.n)
    return report.recall[10]


def train(
    config: TrainConfig,
    corpus: Corpus,
    split: SplitSpec,
    out_dir: str | os.PathLike | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Train with Adam on every next-item pair of the training prefixes.

    After each epoch the validation Recall@10 is computed; the best epoch
    (first one on ties) is kept.  With ``out_dir`` the per-epoch log and the
    ``best.ckpt`` / ``final.ckpt`` files are written there.
    """
    rng = np.random.default_rng(config.seed)
    if resume is None:
        params = init_params(config, corpus.num_items, corpus.dims, rng)
        adam = AdamState.for_params(params, lr=config.lr)
        start = 0
    else:
        params = {k: v.copy() for k, v in resume.params.items()}
        adam = copy.deepcopy(resume.adam)
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    ids, targets = training_arrays(split, config.n)
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "train_log.tsv"
        log_path.write_text("", encoding="utf-8")

    history: list[EpochLog] = []
    best: Checkpoint | None = None
    best_metric = -math.inf
    for epoch in range(start + 1, start + config.epochs + 1):
        order = rng.permutation(len(ids))
        sums = np.zeros(4)
        for s in range(0, len(order), config.batch_size):
            sel = order[s:s + config.batch_size]
            batch = batch_from_ids(corpus, ids[sel], targets[sel])
            loss, parts, grads = loss_and_grads(params, batch, config, rng=rng)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, batch starting {s}: "
                                       f"loss={loss}, parts={parts}")
            params = adam_step(adam, params, grads)
            sums += len(sel) * np.array([parts.get(k, 0.0) for k in ("id", "image", "text", "category")])
        means = sums / len(order)
        val = validation_recall(params, config, corpus, split)
        entry = EpochLog(epoch, *means, val)
        history.append(entry)
        log.info("epoch %d loss_id %.4f val_recall@10 %.4f", epoch, means[0], val)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(entry.line() + "\n")
        if val > best_metric:
            best_metric = val
            best = _snapshot(params, config, adam, epoch, val, rng)
    final = _snapshot(params, config, adam, start + config.epochs, best_metric, rng)
    if out_dir is not None:
        save_checkpoint(best, Path(out_dir) / "best.ckpt")
        save_checkpoint(final, Path(out_dir) / "final.ckpt")
    return TrainResult(best, final, history)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    best_config: TrainConfig
    best_metric: float
    rows: list[tuple[dict[str, Any], float]]

    def lines(self) -> list[str]:
        keys = sorted({k for point, _ in self.rows for k in point})
        out = ["\t".join(keys + ["val_recall10"])]
        for point, metric in self.rows:
            out.append("\t".join([_cell(point.get(k, "")) for k in keys] + [repr(metric)]))
        return out


def _cell(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(value) or "none"
    return str(value)


def grid_points(grids: Mapping[str, Sequence[Any]] | Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Cartesian product (in key order) for a mapping, or an explicit list of points."""
    if isinstance(grids, Mapping):
        if not grids or any(len(v) == 0 for v in grids.values()):
            raise ValueError("grid must be nonempty")
        keys = list(grids)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]
    points = [dict(p) for p in grids]
    if not points:
        raise ValueError("grid must be nonempty")
    return points


def grid_search(config: TrainConfig, grids, corpus: Corpus, split: SplitSpec) -> GridResult:
    """Train every grid point and keep the best validation Recall@10 (first wins ties)."""
    rows = []
    best_cfg, best_metric = None, -math.inf
    for point in grid_points(grids):
        cfg = config.replace(**point)
        result = train(cfg, corpus, split)
        metric = result.best.best_metric
        rows.append((point, metric))
        log.info("grid point %s -> val_recall@10 %.4f", point, metric)
        if metric > best_metric:
            best_cfg, best_metric = cfg, metric
    return GridResult(best_cfg, best_metric, rows)


def evaluate_checkpoint(ckpt: Checkpoint, corpus: Corpus, split: SplitSpec, role: str = "test",
                        ks=(10, 20)) -> MetricsReport:
    return evaluate(ckpt.scorer(corpus), corpus, split, role, ks, ckpt.config.n)


__all__ = ["Checkpoint", "CheckpointError", "EpochLog", "GridResult", "TrainResult", "TrainingDiverged",
           "checkpoint_bytes", "evaluate_checkpoint", "grid_points", "grid_search", "load_checkpoint",
           "make_batch", "parse_checkpoint", "save_checkpoint", "train", "training_arrays"]
