"""The full recommender: parameters, batching, forward pass and objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import BLOCK_KEYS, FUSION_KEYS, AttentionTrace, block_params, causal_mask, stack_forward
from .autodiff import GradTape, Tensor
from .config import TrainConfig
from .data import MODALITIES, Corpus, window
from .embedding import PROJECTION_KEYS, embed_ids, fuse_modalities
from .losses import HEAD_KEYS, LossWeights, multitask_parts, loss_id, score_items, total_loss


def param_shapes(config: TrainConfig, num_items: int, dims: dict[str, int]) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in the fixed initialisation order."""
    d, dp, h = config.d, config.d_prime, config.heads
    shapes: dict[str, tuple[int, ...]] = {"item_emb": (num_items + 1, d)}
    if not config.tied:
        shapes["item_out"] = (d, num_items)
    for mod in MODALITIES:
        shapes[PROJECTION_KEYS[mod]] = (dims[mod], dp)
    for k in range(config.blocks):
        pre = f"block{k}."
        shapes.update({
            pre + "wq": (d, d), pre + "wk": (d, d), pre + "wv": (d, d),
            pre + "wq_m": (dp, dp), pre + "wk_m": (dp, dp),
            pre + "ffn_w1": (d, d), pre + "ffn_b1": (d,),
            pre + "ffn_w2": (d, d), pre + "ffn_b2": (d,),
            pre + "ln_gain": (d,), pre + "ln_bias": (d,),
        })
        if config.fusion == "concat":
            shapes[pre + "concat_w"] = (h, 2)
            shapes[pre + "concat_b"] = (h,)
        elif config.fusion == "gate":
            shapes[pre + "gate"] = (h,)
    for mod in MODALITIES:
        w, b = HEAD_KEYS[mod]
        shapes[w] = (d, dims[mod])
        shapes[b] = (dims[mod],)
    return shapes


def init_params(config: TrainConfig, num_items: int, dims: dict[str, int],
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Normal(0, init_std) matrices, zero biases, unit LN gains.

    Draws happen in :func:`param_shapes` order.  The padding row of the item
    table is zeroed; concat weights start at (1, 1) so concat begins as sum.
    """
    params = {}
    for name, shape in param_shapes(config, num_items, dims).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_b") or leaf in ("ffn_b1", "ffn_b2", "ln_bias", "concat_b", "gate"):
            params[name] = np.zeros(shape)
        elif leaf == "ln_gain":
            params[name] = np.ones(shape)
        elif leaf == "concat_w":
            params[name] = np.ones(shape)
        else:
            params[name] = rng.normal(0.0, config.init_std, size=shape)
    params["item_emb"][0] = 0.0
    return params


@dataclass
class Batch:
    """Windowed inputs and next-item targets for a set of examples."""

    ids: np.ndarray                # [B, n] int, 0 = padding, most recent last
    features: dict[str, np.ndarray]  # modality -> [B, n, d_j], zero rows at padding
    target: np.ndarray             # [B] int item ids
    target_features: dict[str, np.ndarray]  # modality -> [B, d_j]
    users: list[str]

    def __len__(self) -> int:
        return len(self.target)


def make_batch(corpus: Corpus, histories: list[list[int]], targets, n: int,
               users: list[str] | None = None) -> Batch:
    ids = np.stack([window(h, n) for h in histories]) if histories else np.zeros((0, n), dtype=np.int64)
    target = np.asarray(targets, dtype=np.int64)
    return batch_from_ids(corpus, ids, target, users)


def batch_from_ids(corpus: Corpus, ids: np.ndarray, target: np.ndarray, users=None) -> Batch:
    mats = {"image": corpus.image, "text": corpus.text, "category": corpus.category}
    return Batch(
        ids=ids,
        features={m: mats[m][ids] for m in MODALITIES},
        target=target,
        target_features={m: mats[m][target] for m in MODALITIES},
        users=list(users) if users is not None else [""] * len(target),
    )


@dataclass
class ForwardResult:
    final: Tensor            # [B, d] representation at the last position
    hidden: Tensor           # [B, n, d]
    logits: Tensor           # [B, I]
    traces: list[AttentionTrace | None]


def as_leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.parameter(v, name=k) for k, v in params.items()}


def forward(params: dict[str, Tensor], batch: Batch, config: TrainConfig,
            rng: np.random.Generator | None = None, trace: bool = False) -> ForwardResult:
    """Compute final-position representations and item logits.

    Passing ``rng`` enables dropout (training mode); without it the pass is
    deterministic.
    """
    E_id = embed_ids(batch.ids, params["item_emb"])
    proj = {m: params[PROJECTION_KEYS[m]] for m in MODALITIES}
    Em = fuse_modalities(batch.features, proj, config.modalities)
    mask = causal_mask(batch.ids)
    blocks = [block_params(params, k) for k in range(config.blocks)]
    R, traces = stack_forward(E_id, Em, blocks, mask, heads=config.heads, fusion=config.fusion,
                              dropout=config.dropout, ln_eps=config.ln_eps, rng=rng, trace=trace)
    final = R[:, -1, :]
    logits = score_items(final, params["item_emb"], params.get("item_out"))
    return ForwardResult(final, R, logits, traces)


def compute_loss(params: dict[str, Tensor], batch: Batch, config: TrainConfig,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Total multitask loss and its parts (``id`` plus active modalities)."""
    out = forward(params, batch, config, rng=rng)
    parts = {"id": loss_id(out.logits, batch.target)}
    active = config.modalities if config.lam > 0 else ()
    parts.update(multitask_parts(out.final, params, batch.target_features, active))
    return total_loss(parts, LossWeights(config.lam, tuple(active))), parts


def loss_and_grads(params: dict[str, np.ndarray], batch: Batch, config: TrainConfig,
                   rng: np.random.Generator | None = None):
    leaves = as_leaves(params)
    with GradTape() as tape:
        loss, parts = compute_loss(leaves, batch, config, rng=rng)
    grads = ad.backward(tape, loss, leaves)
    return loss.item(), {k: v.item() for k, v in parts.items()}, grads


def predict_logits(params: dict[str, np.ndarray], batch: Batch, config: TrainConfig) -> np.ndarray:
    leaves = {k: Tensor(v) for k, v in params.items()}
    return forward(leaves, batch, config).logits.numpy()


class ModelScorer:
    """Evaluator-facing callable: ``scorer(users, ids) -> logits [B, I]``."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig, corpus: Corpus,
                 batch_size: int = 256):
        self.params, self.config, self.corpus = params, config, corpus
        self.batch_size = batch_size

    def __call__(self, users, ids: np.ndarray) -> np.ndarray:
        out = []
        for s in range(0, len(ids), self.batch_size):
            chunk = ids[s:s + self.batch_size]
            batch = batch_from_ids(self.corpus, chunk, np.ones(len(chunk), dtype=np.int64))
            out.append(predict_logits(self.params, batch, self.config))
        return np.concatenate(out) if out else np.zeros((0, self.corpus.num_items))


__all__ = ["BLOCK_KEYS", "FUSION_KEYS", "Batch", "ForwardResult", "ModelScorer", "as_leaves",
           "batch_from_ids", "compute_loss", "forward", "init_params", "loss_and_grads",
           "make_batch", "param_shapes", "predict_logits"]
