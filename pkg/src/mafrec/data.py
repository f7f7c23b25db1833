"""Corpus ingestion, preprocessing, windowing and the leave-one-out split.

File formats
------------
interactions
    UTF-8 lines ``user_id<TAB>item_id<TAB>timestamp`` (integer seconds).
features (one file per modality)
    header ``item_count dim`` then ``item_id v1 ... vdim`` space separated.
    Category values are restricted to 0/1.
id-map
    lines ``external_id<TAB>internal_id``.

Internal item ids are contiguous integers starting at 1; id 0 is padding.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np

MODALITIES = ("image", "text", "category")
PAD = 0


class DataError(ValueError):
    """Malformed or inconsistent corpus input."""


@dataclass
class InteractionLog:
    """Per-user item sequences in non-decreasing timestamp order."""

    sequences: dict[str, list]
    timestamps: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        for user, seq in self.sequences.items():
            if user not in self.timestamps:
                self.timestamps[user] = list(range(len(seq)))
            if len(self.timestamps[user]) != len(seq):
                raise DataError(f"user {user!r}: {len(seq)} items but {len(self.timestamps[user])} timestamps")

    @property
    def users(self) -> list[str]:
        return list(self.sequences)

    def items(self) -> set:
        return {i for seq in self.sequences.values() for i in seq}

    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionLog):
            return NotImplemented
        return self.sequences == other.sequences and self.timestamps == other.timestamps


@dataclass
class FeatureStore:
    """Per-item image, text and multi-hot category vectors.

    Each modality is a mapping ``item -> 1-d float64 array``.  A raw store may
    be missing some items in some modalities; a filtered store is complete.
    """

    image: dict = field(default_factory=dict)
    text: dict = field(default_factory=dict)
    category: dict = field(default_factory=dict)
    dims: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for mod in MODALITIES:
            table = getattr(self, mod)
            for item, vec in table.items():
                vec = np.asarray(vec, dtype=np.float64)
                table[item] = vec
                dim = self.dims.setdefault(mod, vec.shape[0])
                if vec.shape != (dim,):
                    raise DataError(f"{mod} vector for item {item!r} has length {vec.shape[0]}, expected {dim}")
                if mod == "category":
                    if not np.isin(vec, (0.0, 1.0)).all():
                        raise DataError(f"category vector for item {item!r} has entries outside {{0, 1}}")
                    if not vec.any():
                        raise DataError(f"category vector for item {item!r} has no active label")

    def has_all(self, item) -> bool:
        return all(item in getattr(self, mod) for mod in MODALITIES)

    def matrix(self, modality: str, num_items: int) -> np.ndarray:
        """Dense ``(num_items + 1) x dim`` matrix for int-keyed stores; row 0 is zero."""
        table = getattr(self, modality)
        out = np.zeros((num_items + 1, self.dims[modality]))
        for item, vec in table.items():
            out[int(item)] = vec
        return out


@dataclass
class Corpus:
    """A filtered corpus with contiguous internal item ids ``1..num_items``."""

    log: InteractionLog
    features: FeatureStore
    id_map: dict[str, int]
    num_items: int

    def __post_init__(self):
        self.image = self.features.matrix("image", self.num_items)
        self.text = self.features.matrix("text", self.num_items)
        self.category = self.features.matrix("category", self.num_items)

    @property
    def dims(self) -> dict[str, int]:
        return dict(self.features.dims)

    @property
    def users(self) -> list[str]:
        return sorted(self.log.sequences)

    def stats(self) -> dict[str, float]:
        n_users = len(self.log.sequences)
        n_inter = self.log.num_interactions()
        return {
            "users": n_users,
            "items": self.num_items,
            "avg_actions_per_user": n_inter / n_users,
            "avg_actions_per_item": n_inter / self.num_items,
            "interactions": n_inter,
        }


def _sort_key(x: Hashable):
    # ints sort numerically, everything else by string form
    return (0, x, "") if isinstance(x, (int, np.integer)) else (1, 0, str(x))


# ---------------------------------------------------------------------------
# preprocessing


def filter_corpus(log: InteractionLog, store: FeatureStore, min_interactions: int = 5) -> Corpus:
    """Drop items lacking any modality, then iterate min-count filtering to a fixed point.

    Users and items with fewer than ``min_interactions`` interactions are
    removed repeatedly until nothing changes.  Surviving items are remapped to
    ``1..I`` in sorted order of their original ids.
    """
    if min_interactions < 1:
        raise ValueError("min_interactions must be >= 1")
    seqs = {}
    for user, seq in log.sequences.items():
        ts = log.timestamps[user]
        seqs[user] = [(i, t) for i, t in zip(seq, ts) if store.has_all(i)]

    while True:
        changed = False
        for user in list(seqs):
            if len(seqs[user]) < min_interactions:
                del seqs[user]
                changed = True
        counts = Counter(i for seq in seqs.values() for i, _ in seq)
        rare = {i for i, c in counts.items() if c < min_interactions}
        if rare:
            changed = True
            for user in seqs:
                seqs[user] = [(i, t) for i, t in seqs[user] if i not in rare]
        if not changed:
            break

    if not seqs:
        raise DataError(f"no interactions left after filtering with min_interactions={min_interactions}")

    kept = sorted({i for seq in seqs.values() for i, _ in seq}, key=_sort_key)
    remap = {item: k + 1 for k, item in enumerate(kept)}
    users = sorted(seqs, key=_sort_key)
    new_log = InteractionLog(
        {u: [remap[i] for i, _ in seqs[u]] for u in users},
        {u: [t for _, t in seqs[u]] for u in users},
    )
    new_store = FeatureStore(
        **{mod: {remap[i]: getattr(store, mod)[i] for i in kept} for mod in MODALITIES},
        dims=dict(store.dims),
    )
    id_map = {str(item): remap[item] for item in kept}
    return Corpus(new_log, new_store, id_map, len(kept))


def window(seq: Iterable[int], n: int) -> np.ndarray:
    """Right-align the last ``min(len(seq), n)`` ids in a length-``n`` vector, left-padded with 0."""
    if n < 1:
        raise ValueError("window length must be >= 1")
    seq = list(seq)
    if not seq:
        raise ValueError("cannot window an empty sequence")
    tail = seq[-n:]
    out = np.zeros(n, dtype=np.int64)
    out[n - len(tail):] = tail
    return out


@dataclass
class SplitSpec:
    """Leave-one-out roles per user."""

    train_prefix: dict[str, list[int]]
    validation: dict[str, int]
    test: dict[str, int]

    def train_pairs(self) -> list[tuple[str, list[int], int]]:
        """Every next-item pair inside each training prefix: ``(user, history, target)``."""
        pairs = []
        for user, prefix in self.train_prefix.items():
            for k in range(1, len(prefix)):
                pairs.append((user, prefix[:k], prefix[k]))
        return pairs

    def history(self, user: str, role: str) -> list[int]:
        """Input history preceding the target of ``role`` ('validation' or 'test')."""
        prefix = self.train_prefix[user]
        if role == "validation":
            hist = list(prefix)
        elif role == "test":
            hist = list(prefix) + [self.validation[user]]
        else:
            raise ValueError(f"unknown role {role!r}")
        if not hist:
            raise DataError(f"user {user!r} has empty history for role {role!r}")
        return hist

    def target(self, user: str, role: str) -> int:
        if role == "validation":
            return self.validation[user]
        if role == "test":
            return self.test[user]
        raise ValueError(f"unknown role {role!r}")


def leave_one_out(log: InteractionLog) -> SplitSpec:
    """Last item is test, second-to-last is validation, the rest is the training prefix."""
    train, valid, test = {}, {}, {}
    for user in sorted(log.sequences, key=_sort_key):
        seq = log.sequences[user]
        if len(seq) < 3:
            raise DataError(f"user {user!r} has {len(seq)} interactions; leave-one-out needs at least 3")
        train[user] = list(seq[:-2])
        valid[user] = seq[-2]
        test[user] = seq[-1]
    return SplitSpec(train, valid, test)


# ---------------------------------------------------------------------------
# file io


def read_interactions(path: str | os.PathLike) -> InteractionLog:
    rows: dict[str, list[tuple[int, int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            try:
                ts_val = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            rows.setdefault(user, []).append((ts_val, lineno, item))
    seqs, stamps = {}, {}
    for user in sorted(rows):
        ordered = sorted(rows[user])  # by timestamp, ties keep file order
        seqs[user] = [item for _, _, item in ordered]
        stamps[user] = [ts for ts, _, _ in ordered]
    return InteractionLog(seqs, stamps)


def write_interactions(log: InteractionLog, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user in sorted(log.sequences, key=_sort_key):
            for item, ts in zip(log.sequences[user], log.timestamps[user]):
                fh.write(f"{user}\t{item}\t{ts}\n")


def read_features(path: str | os.PathLike, modality: str, known_items: set | None = None) -> dict:
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}:1: header must be 'item_count dim'")
        count, dim = int(header[0]), int(header[1])
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.split()
            item = parts[0]
            if len(parts) - 1 != dim:
                raise DataError(f"{path}:{lineno}: item {item!r} has {len(parts) - 1} values, header says {dim}")
            if item in table:
                raise DataError(f"{path}:{lineno}: duplicate item id {item!r}")
            if known_items is not None and item not in known_items:
                raise DataError(f"{path}:{lineno}: unknown item id {item!r}")
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            if modality == "category" and not np.isin(vec, (0.0, 1.0)).all():
                raise DataError(f"{path}:{lineno}: category values must be 0 or 1")
            table[item] = vec
    if len(table) != count:
        raise DataError(f"{path}: header declares {count} items but file has {len(table)}")
    return table


def _fmt(x: float) -> str:
    return repr(float(x))


def write_features(table: dict, dim: int, path: str | os.PathLike, modality: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(table)} {dim}\n")
        for item in sorted(table, key=_sort_key):
            vec = table[item]
            if modality == "category":
                vals = " ".join(str(int(v)) for v in vec)
            else:
                vals = " ".join(_fmt(v) for v in vec)
            fh.write(f"{item} {vals}\n")


def load_corpus(
    interactions: str | os.PathLike,
    features: dict[str, str | os.PathLike],
) -> tuple[InteractionLog, FeatureStore]:
    """Read an interaction file and one feature file per modality.

    Item ids stay as strings.  Feature rows for items absent from the
    interaction file are rejected.
    """
    log = read_interactions(interactions)
    known = log.items()
    tables = {}
    for mod in MODALITIES:
        if mod not in features or features[mod] is None:
            raise DataError(f"missing feature file for modality {mod!r}")
        path = Path(features[mod])
        if not path.exists():
            raise DataError(f"feature file for modality {mod!r} not found: {path}")
        tables[mod] = read_features(path, mod, known)
    return log, FeatureStore(**tables)


def save_corpus(
    log: InteractionLog,
    store: FeatureStore,
    out_dir: str | os.PathLike,
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"interactions": out / "interactions.tsv"}
    write_interactions(log, paths["interactions"])
    for mod in MODALITIES:
        paths[mod] = out / f"{mod}.txt"
        write_features(getattr(store, mod), store.dims[mod], paths[mod], mod)
    return paths


def load_prepared(data_dir: str | os.PathLike) -> Corpus:
    """Load a directory written by :func:`save_prepared` (internal integer ids)."""
    d = Path(data_dir)
    log, store = load_corpus(d / "interactions.tsv", {m: d / f"{m}.txt" for m in MODALITIES})
    id_map = read_id_map(d / "id_map.tsv") if (d / "id_map.tsv").exists() else {}
    to_int = lambda x: int(x)  # noqa: E731
    try:
        log = InteractionLog(
            {u: [to_int(i) for i in s] for u, s in log.sequences.items()}, log.timestamps)
        store = FeatureStore(**{m: {to_int(i): v for i, v in getattr(store, m).items()} for m in MODALITIES},
                             dims=store.dims)
    except ValueError:
        raise DataError(f"{d}: prepared corpus must use integer item ids") from None
    ids = sorted(store.image)
    if ids != list(range(1, len(ids) + 1)) or not all(store.has_all(i) for i in ids):
        raise DataError(f"{d}: item ids must be contiguous 1..I with all modalities present")
    if not id_map:
        id_map = {str(i): i for i in ids}
    return Corpus(log, store, id_map, len(ids))


def save_prepared(corpus: Corpus, out_dir: str | os.PathLike) -> dict[str, Path]:
    paths = save_corpus(corpus.log, corpus.features, out_dir)
    paths["id_map"] = Path(out_dir) / "id_map.tsv"
    write_id_map(corpus.id_map, paths["id_map"])
    return paths


def write_id_map(id_map: dict[str, int], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ext, internal in sorted(id_map.items(), key=lambda kv: kv[1]):
            fh.write(f"{ext}\t{internal}\n")


def read_id_map(path: str | os.PathLike) -> dict[str, int]:
    out: dict[str, int] = {}
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'external_id<TAB>internal_id'")
            ext, internal = parts[0], int(parts[1])
            if ext in out or internal in seen:
                raise DataError(f"{path}:{lineno}: duplicate id")
            out[ext] = internal
            seen.add(internal)
    return out


def write_split(split: SplitSpec, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user in split.train_prefix:
            fh.write(f"{user}\ttrain\t{' '.join(map(str, split.train_prefix[user]))}\n")
            fh.write(f"{user}\tvalidation\t{split.validation[user]}\n")
            fh.write(f"{user}\ttest\t{split.test[user]}\n")
