"""Finite-difference checks of the composite training losses on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .data import SynthConfig, synth_gen
from .encoder import EncoderConfig
from .model import MultiAspectModel
from .objectives import LossWeights, PretrainBatch, RelevanceBatch, finetune_loss, pretrain_loss
from .tensor import finite_diff_check
from .training import build_vocab_and_schema, encode_items, mask_tokens

TINY_ENCODER = EncoderConfig(hidden=16, layers=2, heads=2, ff_dim=32, max_len=16, dropout=0.0)
TINY_SYNTH = SynthConfig(n_items=100, n_train=20, n_dev=0, n_test=0, n_brands=6, n_colors=5,
                         n_categories=8, specific_pool=150, noise_pool=30, judged_per_query=10)

# every valid representation x weighting x fusion-objects combination
VARIANTS = [(r, w, o) for r in ("reuse_cls", "extra_k", "first_k")
            for w in ("cls_gating", "presence") for o in ("other", "cls", "none")
            if not (r == "reuse_cls" and o == "other")]


@dataclass(frozen=True)
class GradCheckResult:
    pretrain: float
    finetune: float

    @property
    def max_rel_err(self) -> float:
        return max(self.pretrain, self.finetune)


def tiny_config(base: RunConfig | None = None, **overrides) -> RunConfig:
    base = base or RunConfig()
    cfg = replace(base, dtype="float64", encoder=TINY_ENCODER, item_max_len=16, query_max_len=8,
                  lambda_p=base.lambda_p or 0.1, lambda_f=base.lambda_f or 0.05, use_app=True)
    if cfg.aspect_repr == "first_k" and not cfg.first_k_order:
        cfg = replace(cfg, first_k_order=tuple(cfg.aspects))
    return cfg.with_overrides(overrides) if overrides else cfg


def gradient_check(cfg: RunConfig, seed: int = 0, batch: int = 4, max_entries: int = 6,
                   h: float = 1e-5, jitter: float = 0.2, floor: float = 1e-4) -> GradCheckResult:
    """Max relative error of autodiff vs central differences for both composite losses.

    Runs in 64-bit with dropout off so the loss is a deterministic function of
    the parameters; samples ``max_entries`` coordinates per parameter tensor.
    Parameters are moved off the initialization by ``jitter``-scaled noise:
    at init attention is almost uniform, its q/k gradients are ~1e-7 and a
    central difference cannot resolve them to 1e-4 relative (round-off alone
    is ~eps*|L|/h ~ 1e-10 absolute).

    ``floor`` bounds the relative-error denominator. Some coordinates have an
    exactly zero true gradient (key biases are softmax-shift invariant) and the
    fine-tuning logits reach ~1e2, so central differences carry ~1e-9 absolute
    round-off; floor * 1e-4 keeps that noise below the pass threshold.
    """
    model, pb, rb = tiny_batches(cfg, seed, batch, jitter)
    weights = LossWeights(cfg.lambda_p, cfg.lambda_f, cfg.use_app)
    params = list(model.params.values())
    pre = finite_diff_check(lambda: pretrain_loss(model, pb, weights).total, params, h=h,
                            max_entries=max_entries, rng=np.random.default_rng(seed), prefer_nonzero=True, floor=floor)
    fine = finite_diff_check(lambda: finetune_loss(model, rb, weights).total, params, h=h,
                             max_entries=max_entries, rng=np.random.default_rng(seed + 1), prefer_nonzero=True,
                             floor=floor)
    return GradCheckResult(pre, fine)


def tiny_batches(cfg: RunConfig, seed: int = 0, batch: int = 4,
                 jitter: float = 0.0) -> tuple[MultiAspectModel, PretrainBatch, RelevanceBatch]:
    """A 64-bit tiny model plus one pre-training and one fine-tuning batch.

    The fine-tuning batch holds ``batch`` queries with one exact item each,
    followed by ``batch`` hard negatives.
    """
    cfg = replace(cfg, dtype="float64", encoder=replace(cfg.encoder, dropout=0.0))
    cfg.validate()
    items, queries, qrels = synth_gen(seed, TINY_SYNTH)
    vocab, schema = build_vocab_and_schema(items, cfg)
    model = MultiAspectModel(cfg.model_config(len(vocab)), vocab, schema, seed=seed)
    if jitter:
        noise = np.random.default_rng(seed + 7)
        for p in model.params.values():
            p.data = p.data + jitter * noise.standard_normal(p.shape)
    rng = np.random.default_rng(seed)
    enc = encode_items(items, model, cfg)
    max_len = model.config.encoder.max_len

    ids, mask, targets = enc.batch(list(range(batch)), model.min_width, max_len)
    corrupted, (bi, pi), originals = mask_tokens(ids, cfg.mlm_ratio, rng, len(vocab))
    pb = PretrainBatch(corrupted, mask, bi, pi, originals, targets)

    pos_of = {it.id: i for i, it in enumerate(items)}
    exact: dict[str, int] = {}
    for r in qrels:
        if r.label == "E":
            exact.setdefault(r.query_id, pos_of[r.item_id])
    text_of = {q.id: q.text for q in queries}
    qids = sorted(exact)[:batch]
    pos = [exact[q] for q in qids]
    neg = [i for i in range(len(items)) if i not in pos][:len(qids)]
    q_ids, q_mask = model.batch_ids([text_of[q] for q in qids], cfg.query_max_len)
    i_ids, i_mask, i_targets = enc.batch(pos + neg, model.min_width, max_len)
    rb = RelevanceBatch(q_ids, q_mask, i_ids, i_mask, i_targets, len(qids))
    return model, pb, rb
