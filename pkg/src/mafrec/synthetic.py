"""Planted-pattern corpora with known ground truth and Bayes-optimal rankings.

Two generators:

``markov``
    A first-order Markov chain over items (cycle, uniform, block, style or
    random Dirichlet rows).  Item features are a noisy style centroid and a
    one-hot style category, so every modality reflects the style.

``style_recall``
    Items are split into *pool* styles and *probe* styles.  Each user first
    sees one pool item of every pool style (in random order), then alternates
    a fresh probe item with a *recall*: the user's pool item whose style is
    the partner of the probe's style.  The partner map lives only in feature
    space.  An observer who sees item ids but not their styles can only tell
    that the next item is one of the pool items; an observer with the
    features can name it.  ``fill`` extra uniform draws from the pool precede
    every probe; they are equally ambiguous for both observers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Corpus, FeatureStore, InteractionLog, save_prepared

TRANSITIONS = ("cycle", "uniform", "blocks", "style", "random")


@dataclass(frozen=True)
class SynthSpec:
    mode: str = "markov"
    num_items: int = 50
    num_users: int = 200
    min_len: int = 8
    max_len: int = 20
    transition: str = "cycle"
    num_styles: int = 5
    block_stay: float = 0.8
    recall_prob: float = 1.0
    fill: int = 0
    noise: float = 0.1
    feature_scale: float = 1.0
    num_clusters: int = 0
    d_v: int = 16
    d_t: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.num_items < 2:
            raise ValueError("degenerate spec: need at least 2 items")
        if self.num_users < 1:
            raise ValueError("need at least one user")
        if not 3 <= self.min_len <= self.max_len:
            raise ValueError("sequence lengths must satisfy 3 <= min_len <= max_len")
        if self.mode not in ("markov", "style_recall"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "markov" and self.transition not in TRANSITIONS:
            raise ValueError(f"unknown transition {self.transition!r}")
        if self.feature_scale <= 0 or self.noise < 0 or self.num_clusters < 0:
            raise ValueError("feature_scale must be positive, noise and num_clusters nonnegative")
        if self.num_styles < 1:
            raise ValueError("num_styles must be >= 1")
        if not 0.0 <= self.recall_prob <= 1.0 or not 0.0 <= self.block_stay <= 1.0:
            raise ValueError("probabilities must be in [0, 1]")
        if self.mode == "style_recall":
            if self.num_items % (2 * self.num_styles):
                raise ValueError("style_recall needs num_items divisible by 2 * num_styles")
            if self.fill < 0:
                raise ValueError("fill must be >= 0")
            if self.min_len < self.num_styles + self.fill + 2:
                raise ValueError("style_recall sequences must be longer than the pool plus one block")
            if self.num_items // (2 * self.num_styles) < (self.max_len - self.num_styles) // (self.fill + 2):
                raise ValueError("style_recall needs more items per style than probes per user")

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "SynthSpec":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise KeyError(f"unknown synth key(s) {unknown}; valid keys: {', '.join(types)}")
        conv = {"int": int, "float": float, "str": str}
        return cls(**{k: conv[types[k]](v) for k, v in values.items()})


# ---------------------------------------------------------------------------
# ground truth


class MarkovTruth:
    """Next-item distribution is the row of a transition matrix (0-based items)."""

    def __init__(self, transition: np.ndarray):
        self.transition = np.asarray(transition, dtype=np.float64)

    def distribution(self, user: str, history: list[int], info: str = "full") -> np.ndarray:
        # item identity already determines the row, so both information sets agree
        return self.transition[history[-1] - 1]


@dataclass
class StyleRecallTruth:
    """Ground truth for ``style_recall`` corpora."""

    styles: np.ndarray           # item id - 1 -> style index
    pool_styles: list[int]
    partner: dict[int, int]      # probe style -> pool style
    pools: dict[str, dict[int, int]]  # user -> pool style -> item id
    recall_prob: float
    num_items: int
    fill: int = 0
    items_by_style: dict[int, np.ndarray] = field(default_factory=dict)

    def distribution(self, user: str, history: list[int], info: str = "full") -> np.ndarray:
        S = len(self.pool_styles)
        pos = len(history)
        p = np.zeros(self.num_items)
        pool = self.pools[user]
        if pos < S:
            used = {int(self.styles[i - 1]) for i in history}
            free = [s for s in self.pool_styles if s not in used]
            for s in free:
                p[self.items_by_style[s] - 1] = 1.0 / (len(free) * len(self.items_by_style[s]))
            return p
        step = (pos - S) % (self.fill + 2)
        members = np.array(sorted(pool.values()))
        if step < self.fill:
            p[members - 1] = 1.0 / S
            return p
        if step == self.fill:
            # fresh probe; its style is uniform and the item is new to the user
            seen = set(history)
            for s in self.partner:
                fresh = [i for i in self.items_by_style[s] if i not in seen]
                p[np.array(fresh) - 1] = 1.0 / (len(self.partner) * len(fresh))
            return p
        if info == "id":
            p[members - 1] = 1.0 / S
            return p
        p[members - 1] = (1.0 - self.recall_prob) / S
        target = pool[self.partner[int(self.styles[history[-1] - 1])]]
        p[target - 1] += self.recall_prob
        return p


@dataclass
class SyntheticCorpus:
    log: InteractionLog
    store: FeatureStore
    truth: MarkovTruth | StyleRecallTruth
    spec: SynthSpec

    def to_corpus(self) -> Corpus:
        return Corpus(self.log, self.store, {str(i): i for i in range(1, self.spec.num_items + 1)},
                      self.spec.num_items)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        paths = save_prepared(self.to_corpus(), out_dir)
        if isinstance(self.truth, MarkovTruth):
            paths["transition"] = Path(out_dir) / "transition.tsv"
            with open(paths["transition"], "w", encoding="utf-8", newline="\n") as fh:
                for row in self.truth.transition:
                    fh.write("\t".join(repr(float(x)) for x in row) + "\n")
        return paths


# ---------------------------------------------------------------------------
# generation


def transition_matrix(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    I = spec.num_items
    styles = _markov_styles(spec)
    if spec.transition == "cycle":
        P = np.zeros((I, I))
        P[np.arange(I), (np.arange(I) + 1) % I] = 1.0
    elif spec.transition == "uniform":
        P = np.full((I, I), 1.0 / I)
    elif spec.transition in ("blocks", "style"):
        same = styles[:, None] == styles[None, :]
        if spec.transition == "style":
            P = same / same.sum(axis=1, keepdims=True)
        else:
            inside = same / same.sum(axis=1, keepdims=True)
            outside = ~same / np.maximum((~same).sum(axis=1, keepdims=True), 1)
            stay = np.where((~same).any(axis=1, keepdims=True), spec.block_stay, 1.0)
            P = stay * inside + (1.0 - stay) * outside
    else:
        P = rng.dirichlet(np.full(I, 0.3), size=I)
    return P


def _markov_styles(spec: SynthSpec) -> np.ndarray:
    S = min(spec.num_styles, spec.num_items)
    if spec.transition == "blocks":
        # contiguous blocks of item ids
        return np.arange(spec.num_items) * S // spec.num_items
    return np.arange(spec.num_items) % S


def _features(styles: np.ndarray, num_styles: int, spec: SynthSpec, rng: np.random.Generator,
              extra_bits: np.ndarray | None = None) -> FeatureStore:
    # centroids have norm ~feature_scale; noise is relative to that scale
    sv = spec.feature_scale / math.sqrt(spec.d_v)
    st = spec.feature_scale / math.sqrt(spec.d_t)
    cv = rng.normal(0.0, sv, size=(num_styles, spec.d_v))
    ct = rng.normal(0.0, st, size=(num_styles, spec.d_t))
    I = len(styles)
    img = cv[styles] + rng.normal(0.0, spec.noise * sv, size=(I, spec.d_v))
    txt = ct[styles] + rng.normal(0.0, spec.noise * st, size=(I, spec.d_t))
    if spec.num_clusters:
        cat = np.eye(spec.num_clusters)[styles % spec.num_clusters]
    else:
        cat = np.eye(num_styles)[styles]
    if extra_bits is not None:
        cat = np.concatenate([cat, extra_bits], axis=1)
    ids = range(1, I + 1)
    return FeatureStore(
        image={i: img[i - 1] for i in ids},
        text={i: txt[i - 1] for i in ids},
        category={i: cat[i - 1] for i in ids},
    )


def _users(spec: SynthSpec) -> list[str]:
    width = max(4, len(str(spec.num_users - 1)))
    return [f"u{u:0{width}d}" for u in range(spec.num_users)]


def generate(spec: SynthSpec) -> SyntheticCorpus:
    """Sample a reproducible corpus (same spec and seed give the same corpus)."""
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "style_recall":
        return _generate_style_recall(spec, rng)
    P = transition_matrix(spec, rng)
    styles = _markov_styles(spec)
    store = _features(styles, int(styles.max()) + 1, spec, rng)
    seqs = {}
    for user in _users(spec):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        cur = int(rng.integers(spec.num_items))
        seq = [cur]
        for _ in range(length - 1):
            cur = int(rng.choice(spec.num_items, p=P[cur]))
            seq.append(cur)
        seqs[user] = [i + 1 for i in seq]
    return SyntheticCorpus(InteractionLog(seqs), store, MarkovTruth(P), spec)


def _generate_style_recall(spec: SynthSpec, rng: np.random.Generator) -> SyntheticCorpus:
    S = spec.num_styles
    I = spec.num_items
    per_style = I // (2 * S)
    # styles 0..S-1 are pool styles, S..2S-1 probe styles; ids shuffled across styles
    styles = np.repeat(np.arange(2 * S), per_style)
    rng.shuffle(styles)
    group = np.stack([styles < S, styles >= S], axis=1).astype(float)
    store = _features(styles, 2 * S, spec, rng, extra_bits=group)
    by_style = {s: np.flatnonzero(styles == s) + 1 for s in range(2 * S)}
    partner = dict(zip(range(S, 2 * S), (int(x) for x in rng.permutation(S))))
    block = spec.fill + 2
    lo = max(1, math.ceil((spec.min_len - S) / block))
    hi = max(lo, (spec.max_len - S) // block)
    seqs, pools = {}, {}
    for user in _users(spec):
        order = rng.permutation(S)
        pool = {int(s): int(rng.choice(by_style[int(s)])) for s in order}
        seq = [pool[int(s)] for s in order]
        queues = {s: list(rng.permutation(by_style[s])) for s in range(S, 2 * S)}
        blocks = int(rng.integers(lo, hi + 1))
        for _ in range(blocks):
            seq.extend(pool[int(rng.integers(S))] for _ in range(spec.fill))
            probe = int(queues[int(rng.integers(S, 2 * S))].pop())
            seq.append(probe)
            if rng.random() < spec.recall_prob:
                seq.append(pool[partner[int(styles[probe - 1])]])
            else:
                seq.append(pool[int(rng.integers(S))])
        seqs[user] = seq
        pools[user] = pool
    truth = StyleRecallTruth(styles, list(range(S)), partner, pools, spec.recall_prob, I,
                             spec.fill, by_style)
    return SyntheticCorpus(InteractionLog(seqs), store, truth, spec)


# ---------------------------------------------------------------------------
# Bayes-optimal ranking


@dataclass
class OracleReport:
    ranks: dict[str, int]
    bayes_recall: dict[int, float]

    def realized_recall(self, k: int) -> float:
        return float(np.mean([r <= k for r in self.ranks.values()]))


def oracle_rank(
    log: InteractionLog,
    truth: MarkovTruth | StyleRecallTruth,
    role: str = "test",
    ks=(1, 10, 20),
    info: str = "full",
) -> OracleReport:
    """Rank items by true next-step probability for each user's held-out target.

    ``bayes_recall[k]`` is the expected Recall@k of the Bayes-optimal ranker,
    i.e. the mean over users of the k largest next-item probabilities.
    ``ranks`` are the realised 1-based target ranks (ties by smaller id).
    ``info`` selects the information set: ``"full"`` or ``"id"`` (item
    identities without their styles).
    """
    if role not in ("test", "validation"):
        raise ValueError(f"unknown role {role!r}")
    cut = 1 if role == "test" else 2
    ranks, tops = {}, {k: [] for k in ks}
    for user, seq in log.sequences.items():
        history, target = list(seq[:-cut]), seq[-cut]
        p = truth.distribution(user, history, info)
        ranks[user] = int(1 + np.count_nonzero(p > p[target - 1])
                          + np.count_nonzero(p[: target - 1] == p[target - 1]))
        ordered = np.sort(p)[::-1]
        for k in ks:
            tops[k].append(ordered[:k].sum())
    return OracleReport(ranks, {k: float(np.mean(v)) for k, v in tops.items()})
