"""Prediction heads and the multitask objective.

All losses are averaged over the batch (rows); within a row the squared
reconstruction error and the category binary cross-entropy are summed over
feature dimensions / labels.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEAD_KEYS = {
    "image": ("head.image_w", "head.image_b"),
    "text": ("head.text_w", "head.text_b"),
    "category": ("head.category_w", "head.category_b"),
}


def score_items(final: Tensor, item_table: Tensor | None = None, output: Tensor | None = None) -> Tensor:
    """Logits over the real items ``1..I`` (column ``j`` is item ``j + 1``).

    With a tied table the logits are ``final @ table[1:]^T``; otherwise an
    explicit ``d x I`` output matrix is used.
    """
    if output is not None:
        return ad.matmul(final, output)
    return ad.matmul(final, ad.swap_last(item_table[1:]))


def loss_id(logits: Tensor, target_ids) -> Tensor:
    """Softmax cross-entropy against 1-based item ids, batch mean."""
    targets = np.asarray(target_ids, dtype=np.int64)
    num_items = logits.shape[-1]
    if targets.size and (targets.min() < 1 or targets.max() > num_items):
        raise IndexError(f"target item outside 1..{num_items}")
    return ad.cross_entropy(logits, targets - 1)


def reconstruct(final: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.matmul(final, weight) + bias


def loss_recon(pred: Tensor, target) -> Tensor:
    """Squared L2 distance per row, batch mean."""
    diff = pred - ad.as_tensor(target)
    rows = diff.shape[0] if diff.ndim > 1 else 1
    return ad.sum(diff * diff) * (1.0 / rows)


def loss_category(final: Tensor, weight: Tensor, bias: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("category targets must be 0 or 1")
    return ad.bce_with_logits(reconstruct(final, weight, bias), target)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0
    active: tuple[str, ...] = ("image", "text", "category")

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def total_loss(parts: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """``L_id + lam * sum(L_j for active j)``; inactive or lam == 0 terms are skipped."""
    total = parts["id"]
    if weights.lam == 0:
        return total
    for mod in weights.active:
        if mod not in parts:
            raise KeyError(f"missing loss part for active modality {mod!r}")
        total = total + parts[mod] * weights.lam
    return total


def multitask_parts(
    final: Tensor,
    params: Mapping[str, Tensor],
    targets: Mapping[str, np.ndarray],
    active: Iterable[str],
) -> dict[str, Tensor]:
    parts = {}
    for mod in active:
        w, b = (params[k] for k in HEAD_KEYS[mod])
        if mod == "category":
            parts[mod] = loss_category(final, w, b, targets[mod])
        else:
            parts[mod] = loss_recon(reconstruct(final, w, b), targets[mod])
    return parts
