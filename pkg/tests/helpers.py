"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from mafrec.config import TrainConfig
from mafrec.data import Corpus, FeatureStore, InteractionLog
from mafrec.autodiff import GradTape
from mafrec.model import as_leaves, compute_loss, init_params, loss_and_grads, make_batch


def make_corpus(seqs: dict[str, list[int]], num_items: int, dims=(3, 2, 3), seed: int = 0) -> Corpus:
    """Integer-id corpus with random image/text vectors and random multi-hot categories."""
    rng = np.random.default_rng(seed)
    dv, dt, dc = dims
    image = {i: rng.normal(size=dv) for i in range(1, num_items + 1)}
    text = {i: rng.normal(size=dt) for i in range(1, num_items + 1)}
    category = {}
    for i in range(1, num_items + 1):
        vec = (rng.random(dc) < 0.5).astype(float)
        vec[rng.integers(dc)] = 1.0
        category[i] = vec
    store = FeatureStore(image=image, text=text, category=category)
    return Corpus(InteractionLog({u: list(s) for u, s in seqs.items()}), store,
                  {str(i): i for i in range(1, num_items + 1)}, num_items)


def generic_params(config: TrainConfig, corpus: Corpus, seed: int = 0, scale: float = 0.4):
    """A generic parameter point: every tensor (biases, gains, fusion weights too) is random."""
    rng = np.random.default_rng(seed)
    params = init_params(config, corpus.num_items, corpus.dims, rng)
    out = {}
    for name, p in params.items():
        out[name] = rng.normal(0.0, scale, size=p.shape)
        if name.endswith("ln_gain"):
            out[name] += 1.0
    out["item_emb"][0] = 0.0
    return out


def fd_relative_errors(params, batch, config, h: float = 1e-5) -> dict[str, float]:
    """Per-tensor relative error of analytic vs central-difference gradients.

    The error of a tensor is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, 1e-8)``.
    """
    _, _, grads = loss_and_grads(params, batch, config)

    def loss_at(ps):
        leaves = as_leaves(ps)
        with GradTape():
            loss, _ = compute_loss(leaves, batch, config)
        return loss.item()

    errors = {}
    for name, p in params.items():
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_at(params)
            p[idx] = old - h
            down = loss_at(params)
            p[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(grads[name]).max(), np.abs(numeric).max(), 1e-8)
        errors[name] = float(np.abs(grads[name] - numeric).max() / scale)
    return errors


def fd_setup(fusion: str, lam: float, seed: int = 0):
    """The 2-user, 6-item, n=4 gradient-check configuration."""
    corpus = make_corpus({"u1": [1, 2, 3, 4, 5, 6], "u2": [6, 5, 4, 3, 2, 1]}, 6, seed=seed)
    config = TrainConfig(n=4, d=8, d_prime=4, blocks=1, heads=2, lam=lam, fusion=fusion, dropout=0.0)
    # one padded window and one truncated window
    batch = make_batch(corpus, [[1, 2], [6, 5, 4, 3, 2]], [3, 1], config.n)
    return config, corpus, batch, generic_params(config, corpus, seed)


# acceptance verdicts, echoed in the terminal summary by conftest.py
ACCEPTANCE: list[str] = []


def verdict(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    print(ACCEPTANCE[-1])
    assert ok, f"{name}: {detail}"


__all__ = ["ACCEPTANCE", "verdict", "fd_relative_errors", "fd_setup", "generic_params", "make_corpus"]
