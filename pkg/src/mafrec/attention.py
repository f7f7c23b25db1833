"""Decoupled item/multimodal attention, score fusion and the block stack.

Shapes use ``B`` for batch, ``h`` heads, ``n`` window length, ``d`` the item
width and ``d'`` the multimodal width.  Block parameters are a dict with keys

    wq, wk, wv        d x d    (head i uses columns i*d_h:(i+1)*d_h)
    wq_m, wk_m        d' x d'  (shared by all heads of the block)
    ffn_w1, ffn_w2    d x d;   ffn_b1, ffn_b2  d
    ln_gain, ln_bias  d
    concat_w  h x 2, concat_b  h      (concat fusion only)
    gate      h                       (gate fusion only)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BLOCK_KEYS = ("wq", "wk", "wv", "wq_m", "wk_m", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
              "ln_gain", "ln_bias")
FUSION_KEYS = {"sum": (), "concat": ("concat_w", "concat_b"), "gate": ("gate",)}


def causal_mask(ids: np.ndarray) -> np.ndarray:
    """Boolean ``[B, 1, n, n]`` attention mask from left-padded id windows.

    Query ``q`` may attend key ``k`` when ``k <= q`` and ``k`` is a real item.
    A padding query attends only to itself so that no row is empty; padding
    rows never feed a real position.
    """
    ids = np.atleast_2d(np.asarray(ids))
    n = ids.shape[-1]
    real = ids != 0
    if not real.any(axis=-1).all():
        raise ValueError("all-padding sequence in batch")
    lower = np.tril(np.ones((n, n), dtype=bool))
    allowed = lower[None] & real[:, None, :]
    allowed |= np.eye(n, dtype=bool)[None]
    return allowed[:, None]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    y = ad.reshape(x, (*lead, n, heads, d // heads))
    nd = y.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return ad.transpose(y, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    y = ad.transpose(x, axes)
    return ad.reshape(y, (*lead, n, h * dh))


def item_scores(R: Tensor, p: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Per-head ``(R W_Q^i)(R W_K^i)^T`` stacked as ``[..., h, n, n]``, plus the split values."""
    q = _split_heads(ad.matmul(R, p["wq"]), heads)
    k = _split_heads(ad.matmul(R, p["wk"]), heads)
    v = _split_heads(ad.matmul(R, p["wv"]), heads)
    return ad.matmul(q, ad.swap_last(k)), v


def multimodal_scores(Em: Tensor, p: dict[str, Tensor]) -> Tensor:
    """``(E_m W_Q^m)(E_m W_K^m)^T`` as ``[..., n, n]``."""
    q = ad.matmul(Em, p["wq_m"])
    k = ad.matmul(Em, p["wk_m"])
    return ad.matmul(q, ad.swap_last(k))


def attention_scores(Rk, Em, params: dict[str, Tensor], head: int, heads: int) -> tuple[Tensor, Tensor]:
    """Raw (unscaled, unmasked) item and multimodal score matrices for one head."""
    Rk, Em = ad.as_tensor(Rk), ad.as_tensor(Em)
    d = Rk.shape[-1]
    if d % heads or not 0 <= head < heads:
        raise ShapeError(f"head {head} invalid for d={d}, heads={heads}")
    if params["wq"].shape[0] != d or params["wq_m"].shape[0] != Em.shape[-1]:
        raise ShapeError(f"shape mismatch: R {Rk.shape}, E_m {Em.shape} vs block params")
    dh = d // heads
    cols = slice(head * dh, (head + 1) * dh)
    q = ad.matmul(Rk, params["wq"][:, cols])
    k = ad.matmul(Rk, params["wk"][:, cols])
    return ad.matmul(q, ad.swap_last(k)), multimodal_scores(Em, params)


def fuse(att_id, att_m, kind: str, params: dict[str, Tensor] | None = None) -> Tensor:
    """Combine item and multimodal score matrices entrywise.

    sum:    att_id + att_m
    concat: w1 * att_id + w2 * att_m + b   (w, b learned per head)
    gate:   s * att_id + (1 - s) * att_m,  s = sigmoid(g) learned per head

    ``att_id`` is ``[..., h, n, n]``; ``att_m`` broadcasts against it.
    """
    att_id, att_m = ad.as_tensor(att_id), ad.as_tensor(att_m)
    if kind == "sum":
        return att_id + att_m
    h = att_id.shape[-3] if att_id.ndim >= 3 else 1
    if kind == "concat":
        w = params["concat_w"]
        w1 = ad.reshape(w[:, 0], (h, 1, 1))
        w2 = ad.reshape(w[:, 1], (h, 1, 1))
        b = ad.reshape(params["concat_b"], (h, 1, 1))
        return att_id * w1 + att_m * w2 + b
    if kind == "gate":
        s = ad.reshape(ad.sigmoid(params["gate"]), (h, 1, 1))
        return att_id * s + att_m * (1.0 - s)
    raise ValueError(f"unknown fusion kind {kind!r}")


@dataclass
class AttentionTrace:
    """Score matrices captured from one block (batch axis first)."""

    item_scores: np.ndarray        # [B, h, n, n] raw
    multimodal_scores: np.ndarray  # [B, n, n] raw, shared across heads
    fused: np.ndarray              # [B, h, n, n] post-softmax
    mask: np.ndarray               # [B, 1, n, n]

    def __len__(self) -> int:
        return self.item_scores.shape[1]

    def head(self, i: int, row: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= i < len(self):
            raise IndexError(f"head {i} out of range for {len(self)} heads")
        return self.item_scores[row, i], self.multimodal_scores[row], self.fused[row, i]


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def maf_block(
    R: Tensor,
    Em: Tensor,
    p: dict[str, Tensor],
    mask: np.ndarray,
    *,
    heads: int,
    fusion: str = "sum",
    dropout: float = 0.0,
    ln_eps: float = 1e-12,
    rng: np.random.Generator | None = None,
    trace: bool = False,
) -> tuple[Tensor, AttentionTrace | None]:
    """One block: fused masked attention, residual, FFN, residual, layer norm.

    Dropout is applied only when ``rng`` is given (training mode); masks are
    drawn after the attention output and after the FFN, in that order.
    """
    d = R.shape[-1]
    att_id, v = item_scores(R, p, heads)
    att_m = multimodal_scores(Em, p)
    att_m_h = ad.reshape(att_m, att_m.shape[:-2] + (1,) + att_m.shape[-2:])
    fused = fuse(att_id, att_m_h, fusion, p)
    probs = ad.masked_softmax_rows(fused * (1.0 / math.sqrt(d)), mask)
    attended = _merge_heads(ad.matmul(probs, v))
    hidden = R + _dropout(attended, dropout, rng)
    ffn = ad.matmul(ad.relu(ad.matmul(hidden, p["ffn_w1"]) + p["ffn_b1"]), p["ffn_w2"]) + p["ffn_b2"]
    out = ad.layer_norm(hidden + _dropout(ffn, dropout, rng), p["ln_gain"], p["ln_bias"], ln_eps)
    tr = None
    if trace:
        tr = AttentionTrace(
            np.array(att_id.data), np.array(att_m.data), np.array(probs.data),
            np.broadcast_to(mask, probs.shape[:-3] + (1,) + probs.shape[-2:]).copy(),
        )
    return out, tr


def block_params(params: dict[str, Tensor], k: int) -> dict[str, Tensor]:
    prefix = f"block{k}."
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def stack_forward(
    E_id: Tensor,
    Em: Tensor,
    blocks: list[dict[str, Tensor]],
    mask: np.ndarray,
    **block_kwargs,
) -> tuple[Tensor, list[AttentionTrace | None]]:
    """Run the blocks in order; the same ``E_m`` is fed to every block."""
    if not blocks:
        raise ValueError("stack_forward needs at least one block")
    R = E_id
    traces = []
    for p in blocks:
        R, tr = maf_block(R, Em, p, mask, **block_kwargs)
        traces.append(tr)
    return R, traces
