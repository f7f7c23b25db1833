"""Item-ID sequence embeddings and the summed multimodal representation."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ALL_MODALITIES

PROJECTION_KEYS = {"image": "proj.image", "text": "proj.text", "category": "proj.category"}


def embed_ids(ids, table: Tensor) -> Tensor:
    """Look up rows of the item table; id 0 maps to the all-zero padding row."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"item id outside [0, {table.shape[0]})")
    return ad.take_rows(table, ids, padding_idx=0)


def ablate_modalities(selector: Iterable[str] | None) -> tuple[str, ...]:
    """Normalise a modality subset; the empty selector means ID-only (SASRec) mode."""
    chosen = set(ALL_MODALITIES if selector is None else selector)
    unknown = chosen - set(ALL_MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    return tuple(m for m in ALL_MODALITIES if m in chosen)


def fuse_modalities(
    inputs: dict[str, np.ndarray | Tensor],
    projections: dict[str, Tensor],
    selector: Iterable[str] | None = None,
) -> Tensor:
    """``E_m = sum_j E_j W_j`` over the selected modalities.

    ``inputs`` maps modality name to a ``[..., n, d_j]`` matrix and
    ``projections`` maps the same names to ``d_j x d'`` weights.  Excluded
    modalities contribute exactly zero; with nothing selected the result is a
    constant zero tensor of the projection width.
    """
    active = ablate_modalities(selector)
    width = {p.shape[1] for p in projections.values()}
    if len(width) != 1:
        raise ShapeError(f"modality projections disagree on output width: {sorted(width)}")
    (d_prime,) = width
    total = None
    for mod in active:
        x = inputs[mod]
        w = projections[mod]
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"{mod}: features have width {x.shape[-1]} but projection expects {w.shape[0]}")
        term = ad.matmul(x, w)
        total = term if total is None else total + term
    if total is None:
        lead = next(iter(inputs.values())).shape[:-1]
        total = Tensor(np.zeros(lead + (d_prime,)))
    return total
