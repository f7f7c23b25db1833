"""Full-ranking leave-one-out evaluation with Recall@k and NDCG@k."""

from __future__ import annotations

import math
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, SplitSpec, window

Scorer = Callable[[list[str], np.ndarray], np.ndarray]


def rank_of_target(logits, target_id: int) -> int:
    """1-based rank of ``target_id`` under descending score.

    ``logits[j]`` scores item ``j + 1``.  Ties go to the smaller item id.
    """
    s = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 1 <= target_id <= s.size:
        raise IndexError(f"target {target_id} outside 1..{s.size}")
    t = s[target_id - 1]
    return int(1 + np.count_nonzero(s > t) + np.count_nonzero(s[: target_id - 1] == t))


def ranks_of_targets(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_of_target` over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    t = logits[rows, targets - 1][:, None]
    higher = (logits > t).sum(axis=1)
    before = np.arange(logits.shape[1])[None, :] < (targets - 1)[:, None]
    ties = ((logits == t) & before).sum(axis=1)
    return 1 + higher + ties


def recall_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    # one relevant item, so the ideal DCG is 1
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    users: int
    ranks: dict[str, int] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = []
        for k in self.ks:
            out.append(f"recall\t{k}\t{self.recall[k]!r}")
        for k in self.ks:
            out.append(f"ndcg\t{k}\t{self.ndcg[k]!r}")
        out.append(f"users\t{self.users}")
        return out

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.lines()) + "\n")

    def table(self, title: str = "") -> str:
        """Recall/NDCG rows in a two-column results-table layout."""
        rows = [f"{'Metric':<10}\t{title or 'Model'}"]
        for name, values in (("Recall", self.recall), ("NDCG", self.ndcg)):
            for k in self.ks:
                rows.append(f"{name + '@' + str(k):<10}\t{values[k]:.4f}")
        return "\n".join(rows)


def read_report(path: str | os.PathLike) -> MetricsReport:
    recall, ndcg, users, ks = {}, {}, 0, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "users":
                users = int(parts[1])
            elif parts[0] in ("recall", "ndcg"):
                k = int(parts[1])
                (recall if parts[0] == "recall" else ndcg)[k] = float(parts[2])
                if k not in ks:
                    ks.append(k)
    return MetricsReport(tuple(ks), recall, ndcg, users)


def summarize(ranks: np.ndarray, ks: Sequence[int], users: Sequence[str] = ()) -> MetricsReport:
    ranks = np.asarray(ranks)
    ks = tuple(sorted(set(int(k) for k in ks)))
    recall = {k: float(np.mean([recall_at_k(r, k) for r in ranks])) for k in ks}
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in ks}
    return MetricsReport(ks, recall, ndcg, len(ranks), dict(zip(users, map(int, ranks))))


def role_inputs(split: SplitSpec, role: str, n: int) -> tuple[list[str], np.ndarray, np.ndarray]:
    users = list(split.train_prefix)
    ids = np.stack([window(split.history(u, role), n) for u in users])
    targets = np.array([split.target(u, role) for u in users], dtype=np.int64)
    return users, ids, targets


def evaluate(
    scorer: Scorer,
    corpus: Corpus,
    split: SplitSpec,
    role: str = "test",
    ks: Sequence[int] = (10, 20),
    n: int = 20,
    exclude_history: bool = False,
) -> MetricsReport:
    """Score every real item for each user and aggregate Recall@k / NDCG@k.

    The input window holds every interaction before the role's target.
    Previously seen items stay in the candidate set unless
    ``exclude_history`` is set, in which case they are pushed to the bottom
    (the target itself is never excluded).
    """
    users, ids, targets = role_inputs(split, role, n)
    logits = np.asarray(scorer(users, ids), dtype=np.float64)
    if logits.shape != (len(users), corpus.num_items):
        raise ValueError(f"scorer returned {logits.shape}, expected {(len(users), corpus.num_items)}")
    if exclude_history:
        logits = logits.copy()
        for row, user in enumerate(users):
            seen = np.array(sorted(set(split.history(user, role)) - {int(targets[row])}), dtype=np.int64)
            if seen.size:
                logits[row, seen - 1] = -np.inf
    ranks = ranks_of_targets(logits, targets)
    return summarize(ranks, ks, users)
