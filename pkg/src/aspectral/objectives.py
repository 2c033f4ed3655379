"""Loss functions: aspect prediction, presence prediction, MLM, relevance, composites."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelOutput, MultiAspectModel
from .tensor import ContractError, Tensor

LAMBDA_P_DEFAULT = 0.1
LAMBDA_F_DEFAULT = 0.0

warnings = Counter()


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = LAMBDA_P_DEFAULT
    lambda_f: float = LAMBDA_F_DEFAULT
    use_app: bool = False

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_f < 0:
            raise ValueError("loss weights must be non-negative")


def _zero(like: Tensor) -> Tensor:
    # keeps the loss connected to the graph so zero gradients propagate
    return T.scale(T.sum(like), 0.0)


def ap_loss(aspect_emb: Tensor, table: Tensor, positives: list[list[int]]) -> Tensor:
    """Aspect value prediction, summed over each item's positive values.

    ``aspect_emb`` is ``[B, H]`` (or ``[H]`` for a single item) and
    ``positives[b]`` the annotated value ids of item b. The result is the mean
    over items that have at least one positive; zero if none do.
    """
    if aspect_emb.ndim == 1:
        aspect_emb = T.reshape(aspect_emb, (1, aspect_emb.shape[0]))
    V = table.shape[0]
    B = aspect_emb.shape[0]
    if len(positives) != B:
        raise ContractError(f"{len(positives)} positive lists for {B} embeddings")
    targets = np.zeros((B, V), dtype=aspect_emb.dtype)
    for b, pos in enumerate(positives):
        for v in pos:
            if not 0 <= v < V:
                raise IndexError(f"aspect value id {v} out of range [0, {V})")
            targets[b, v] = 1.0
    n = int((targets.sum(axis=1) > 0).sum())
    logits = T.matmul(aspect_emb, T.transpose(table, (1, 0)))
    if n == 0:
        return _zero(logits)
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.sum(T.mul(logp, Tensor(targets))), -1.0 / n)


def app_loss(prob: Tensor, y) -> Tensor:
    """Binary presence loss from probabilities (mean over entries)."""
    y = np.asarray(y, dtype=prob.dtype)
    yt = Tensor(np.broadcast_to(y, prob.shape).copy())
    one = Tensor(np.ones(prob.shape, dtype=prob.dtype))
    ll = T.add(T.mul(yt, T.log(prob)), T.mul(T.sub(one, yt), T.log(T.sub(one, prob))))
    return T.scale(T.sum(ll), -1.0 / max(prob.data.size, 1))


def app_loss_logits(logits: Tensor, y) -> Tensor:
    """Same loss as :func:`app_loss` evaluated from logits, stable for large |z|."""
    y = np.asarray(y, dtype=logits.dtype)
    pos = T.mul(T.log_sigmoid(logits), Tensor(y))
    neg = T.mul(T.log_sigmoid(T.scale(logits, -1.0)), Tensor(1.0 - y))
    return T.scale(T.sum(T.add(pos, neg)), -1.0 / max(logits.data.size, 1))


def mlm_loss(model: MultiAspectModel, hidden: Tensor, batch_idx: np.ndarray, positions: np.ndarray,
             originals: np.ndarray) -> Tensor:
    """Mean cross-entropy of the original ids at the masked positions."""
    if len(positions) == 0:
        warnings["mlm_empty_mask"] += 1
        return _zero(hidden)
    rows = hidden[batch_idx, positions]
    return T.cross_entropy(model.mlm_logits(rows), originals)


def relevance_loss(query_emb: Tensor, pos_emb: Tensor, neg_emb: Tensor | None = None) -> Tensor:
    """In-batch softmax CE; every query scores all positives and hard negatives."""
    B = query_emb.shape[0]
    if B < 2:
        raise ContractError("relevance loss needs a batch of at least 2 queries")
    cands = pos_emb if neg_emb is None else T.concat([pos_emb, neg_emb], axis=0)
    scores = T.matmul(query_emb, T.transpose(cands, (1, 0)))
    return T.cross_entropy(scores, np.arange(B))


@dataclass
class AspectTargets:
    """Per-aspect supervision for a batch of items.

    ``positives[a][b]`` are value ids; ``supervised[b]`` marks items whose
    annotations take part in aspect learning (annotation fraction).
    """

    positives: dict[str, list[list[int]]]
    supervised: np.ndarray

    def presence(self, aspect: str) -> np.ndarray:
        return np.array([1.0 if p else 0.0 for p in self.positives[aspect]])


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)


def aspect_learning_loss(model: MultiAspectModel, out: ModelOutput, targets: AspectTargets,
                         use_app: bool) -> tuple[Tensor, dict[str, float]]:
    """Sum over explicit aspects of AP (+ APP); the OTHER slot never enters."""
    sup = np.flatnonzero(targets.supervised)
    parts: dict[str, float] = {}
    rows = out.aspects.rows
    if len(sup) == 0:
        return _zero(rows), parts
    rows = rows[sup]
    logits = model.aspect_presence_logits(out.aspects)[sup] if use_app else None
    terms = []
    for j, a in enumerate(model.schema.aspects):
        pos = [targets.positives[a][b] for b in sup]
        ap = ap_loss(rows[:, j], model.params[f"value.{a}"], pos)
        parts[f"ap.{a}"] = float(ap.data)
        terms.append(ap)
        if use_app:
            y = np.array([1.0 if p else 0.0 for p in pos])
            app = app_loss_logits(logits[:, j], y)
            parts[f"app.{a}"] = float(app.data)
            terms.append(app)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total, parts


@dataclass
class PretrainBatch:
    ids: np.ndarray  # corrupted ids
    mask: np.ndarray
    batch_idx: np.ndarray
    positions: np.ndarray
    originals: np.ndarray
    targets: AspectTargets


def pretrain_loss(model: MultiAspectModel, batch: PretrainBatch, weights: LossWeights,
                  rng: np.random.Generator | None = None) -> LossBreakdown:
    out = model.forward(batch.ids, batch.mask, rng)
    mlm = mlm_loss(model, out.enc.hidden, batch.batch_idx, batch.positions, batch.originals)
    parts = {"mlm": float(mlm.data)}
    if weights.lambda_p == 0:
        return LossBreakdown(mlm, parts)
    al, al_parts = aspect_learning_loss(model, out, batch.targets, weights.use_app)
    parts.update(al_parts)
    parts["aspect"] = float(al.data)
    return LossBreakdown(T.add(mlm, T.scale(al, weights.lambda_p)), parts)


@dataclass
class RelevanceBatch:
    query_ids: np.ndarray
    query_mask: np.ndarray
    item_ids: np.ndarray  # positives then hard negatives, [2B, n]
    item_mask: np.ndarray
    item_targets: AspectTargets
    n_queries: int

    def __post_init__(self):
        if self.n_queries < 2:
            raise ContractError("relevance batch needs at least 2 queries")


def finetune_loss(model: MultiAspectModel, batch: RelevanceBatch, weights: LossWeights,
                  rng: np.random.Generator | None = None) -> LossBreakdown:
    B = batch.n_queries
    q = model.forward(batch.query_ids, batch.query_mask, rng)
    items = model.forward(batch.item_ids, batch.item_mask, rng)
    item_emb = items.embedding
    neg = item_emb[B:] if item_emb.shape[0] > B else None
    rel = relevance_loss(q.embedding, item_emb[:B], neg)
    parts = {"rel": float(rel.data)}
    if weights.lambda_f == 0:
        return LossBreakdown(rel, parts)
    al, al_parts = aspect_learning_loss(model, items, batch.item_targets, weights.use_app)
    parts.update(al_parts)
    parts["aspect"] = float(al.data)
    return LossBreakdown(T.add(rel, T.scale(al, weights.lambda_f)), parts)
