"""Pre-training and fine-tuning loops, Adam, LR schedule and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import (ItemRecord, QrelRecord, QueryRecord, check_qrels, concat_aspects, indicator_token,
                   restrict_annotations)
from .objectives import AspectTargets, PretrainBatch, RelevanceBatch, finetune_loss, pretrain_loss
from .model import MultiAspectModel
from .retrieval import DenseIndex, evaluate_split
from .tensor import Tensor
from .vocab import MASK, PAD, SPECIAL_TOKENS, AspectSchema, ContentVocab, IngestError, build_aspect_schema, build_vocab

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CKPT_MAGIC = b"ASPCKPT\0"
CKPT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ------------------------------------------------------------- optimization

def lr_at(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup * total`` steps, then linear decay to 0."""
    w = max(1, int(round(warmup * total)))
    if step <= w:
        return peak * step / w
    return peak * max(0.0, (total - step) / max(1, total - w))


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=ADAM_BETAS, eps=ADAM_EPS):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: float) -> None:
        """Update every parameter that received a gradient; others are left untouched."""
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** t)
            vhat = self.v[k] / (1 - self.b2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def mask_tokens(ids: np.ndarray, ratio: float, rng: np.random.Generator, vocab_size: int):
    """Select eligible positions w.p. ``ratio`` and corrupt them 80/10/10.

    Eligible means a regular token (not PAD/CLS/SEP/MASK/UNK). Every sequence
    with at least one eligible token gets at least one selected position.
    Returns ``(corrupted, (batch_idx, positions), originals)``.
    """
    ids = np.atleast_2d(np.asarray(ids))
    eligible = ids >= len(SPECIAL_TOKENS)
    chosen = (rng.random(ids.shape) < ratio) & eligible
    for b in np.flatnonzero(~chosen.any(axis=1) & eligible.any(axis=1)):
        cand = np.flatnonzero(eligible[b])
        chosen[b, cand[rng.integers(len(cand))]] = True
    bi, pi = np.nonzero(chosen)
    originals = ids[bi, pi].copy()
    corrupted = ids.copy()
    roll = rng.random(len(bi))
    to_mask = roll < 0.8
    to_rand = (roll >= 0.8) & (roll < 0.9)
    corrupted[bi[to_mask], pi[to_mask]] = MASK
    n_rand = int(to_rand.sum())
    if n_rand:
        corrupted[bi[to_rand], pi[to_rand]] = rng.integers(len(SPECIAL_TOKENS), vocab_size, size=n_rand)
    return corrupted, (bi, pi), originals


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: dict[str, Tensor], header: dict) -> None:
    """Binary checkpoint: magic, version, JSON header, raw tensors, sha256 trailer."""
    names = list(params)
    table, blobs, offset = [], [], 0
    for n in names:
        arr = np.ascontiguousarray(params[n].data)
        raw = arr.tobytes()
        table.append({"name": n, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header, format_version=CKPT_VERSION, tensors=table)
    hbytes = json.dumps(head, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 12 + 32 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    version, hlen = struct.unpack("<IQ", body[len(CKPT_MAGIC):len(CKPT_MAGIC) + 12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(CKPT_MAGIC) + 12
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    data = body[start + hlen:]
    arrays = {}
    for t in header["tensors"]:
        chunk = data[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(chunk, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return header, arrays


def checkpoint_header(model: MultiAspectModel, cfg: RunConfig, stage: str, epoch: int) -> dict:
    return {"stage": stage, "epoch": epoch, "seed": cfg.seed, "config_digest": model.architecture_digest(),
            "run_config_digest": cfg.digest(), "vocab_digest": model.vocab.digest(),
            "schema_digest": model.schema.digest(), "architecture": model.config.architecture()}


def save_run_files(out_dir: Path, cfg: RunConfig, model: MultiAspectModel) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    model.vocab.save(out_dir / "vocab.tsv")
    model.schema.save(out_dir / "schema.tsv")


def load_model(ckpt_path: str | Path, cfg: RunConfig | None = None) -> tuple[MultiAspectModel, RunConfig, dict]:
    """Rebuild a model from a checkpoint and the sidecar files next to it.

    ``cfg`` selects fusion/weighting settings; its architecture must match the
    checkpoint's, otherwise the load is refused.
    """
    from .config import load_config

    ckpt_path = Path(ckpt_path)
    header, arrays = load_checkpoint(ckpt_path)
    run_dir = _find_run_dir(ckpt_path)
    vocab = ContentVocab.load(run_dir / "vocab.tsv")
    schema = AspectSchema.load(run_dir / "schema.tsv")
    if vocab.digest() != header["vocab_digest"] or schema.digest() != header["schema_digest"]:
        raise CheckpointError(f"{ckpt_path}: vocabulary/schema sidecar digest mismatch")
    if cfg is None:
        cfg = load_config(run_dir / "config.txt")
    mcfg = cfg.model_config(len(vocab))
    params = {}
    for name, arr in arrays.items():
        params[name] = Tensor(arr.astype(mcfg.np_dtype, copy=False), requires_grad=True, name=name)
    model = MultiAspectModel(mcfg, vocab, schema, params=params)
    if model.architecture_digest() != header["config_digest"]:
        raise CheckpointError(f"{ckpt_path}: checkpoint architecture {header['architecture']} does not match "
                              f"config {mcfg.architecture()}")
    fresh = MultiAspectModel(mcfg, vocab, schema, seed=0)
    if set(fresh.params) != set(params) or any(fresh.params[n].shape != params[n].shape for n in params):
        raise CheckpointError(f"{ckpt_path}: parameter set does not match the configured model")
    return model, cfg, header


def _find_run_dir(ckpt_path: Path) -> Path:
    for d in (ckpt_path.parent, ckpt_path.parent.parent):
        if (d / "vocab.tsv").exists():
            return d
    raise CheckpointError(f"no vocab.tsv/schema.tsv found next to {ckpt_path}")


def snapshot(model: MultiAspectModel) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def restore(model: MultiAspectModel, snap: dict[str, np.ndarray]) -> None:
    for k, arr in snap.items():
        model.params[k].data = arr.copy()


# -------------------------------------------------------------------- data

def item_texts(items: Sequence[ItemRecord], cfg: RunConfig) -> list[str]:
    if cfg.concat_aspects:
        return [concat_aspects(it, cfg.aspects) for it in items]
    return [it.text for it in items]


def build_vocab_and_schema(items: Sequence[ItemRecord], cfg: RunConfig,
                           extra_texts: Sequence[str] = ()) -> tuple[ContentVocab, AspectSchema]:
    reserved = [indicator_token(a) for a in cfg.aspects] if cfg.concat_aspects else []
    vocab = build_vocab(list(item_texts(items, cfg)) + list(extra_texts), cfg.vocab_cap, reserved)
    schema = build_aspect_schema((it.aspects for it in items), list(cfg.aspects))
    return vocab, schema


@dataclass
class EncodedItems:
    ids: list[np.ndarray]
    positives: dict[str, list[list[int]]]
    supervised: np.ndarray

    def batch(self, idx: Sequence[int], min_width: int, max_len: int) -> tuple[np.ndarray, np.ndarray, AspectTargets]:
        rows = [self.ids[i] for i in idx]
        width = min(max(max(len(r) for r in rows), min_width), max_len)
        ids = np.full((len(rows), width), PAD, dtype=np.int64)
        for j, r in enumerate(rows):
            ids[j, : len(r)] = r
        targets = AspectTargets({a: [self.positives[a][i] for i in idx] for a in self.positives},
                                self.supervised[list(idx)])
        return ids, (ids != PAD).astype(np.int64), targets


def encode_items(items: Sequence[ItemRecord], model: MultiAspectModel, cfg: RunConfig) -> EncodedItems:
    texts = item_texts(items, cfg)
    ids = [model.vocab.encode(t, cfg.item_max_len).ids for t in texts]
    positives = {a: [model.schema.value_ids(a, it.aspects.get(a, [])) for it in items] for a in cfg.aspects}
    supervised = np.array([bool(it.aspects) for it in items])
    return EncodedItems(ids, positives, supervised)


# ---------------------------------------------------------------- pretrain

@dataclass
class TrainResult:
    model: MultiAspectModel
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None


def _check_finite(loss: Tensor, what: str, batch_ids: Sequence[str]) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite {what} loss; last batch item ids: {list(batch_ids)[:64]}")


def pretrain(cfg: RunConfig, items: Sequence[ItemRecord], out_dir: str | Path | None = None,
             on_record: Callable[[dict], None] | None = None, extra_vocab_texts: Sequence[str] = ()) -> TrainResult:
    """MLM + weighted aspect learning over the item corpus; checkpoint each epoch."""
    cfg.validate()
    vocab, schema = build_vocab_and_schema(items, cfg, extra_vocab_texts)
    model = MultiAspectModel(cfg.model_config(len(vocab)), vocab, schema, seed=_stream(cfg.seed, "init"))
    supervised_items = restrict_annotations(items, cfg.annotation_fraction, cfg.seed)
    enc = encode_items(supervised_items, model, cfg)
    order_rng = np.random.default_rng(_stream(cfg.seed, "order"))
    mask_rng = np.random.default_rng(_stream(cfg.seed, "mask"))
    drop_rng = np.random.default_rng(_stream(cfg.seed, "dropout"))
    weights = cfg.loss_weights()
    sched = cfg.pretrain
    n = len(items)
    steps_per_epoch = math.ceil(n / sched.batch_size)
    total = steps_per_epoch * sched.epochs
    opt = Adam(model.params)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        save_run_files(out, cfg, model)
        (out / "ckpt").mkdir(exist_ok=True)
    step = 0
    for epoch in range(1, sched.epochs + 1):
        perm = order_rng.permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, sched.batch_size):
            idx = perm[start:start + sched.batch_size]
            ids, mask, targets = enc.batch(idx, model.min_width, model.config.encoder.max_len)
            corrupted, (bi, pi), originals = mask_tokens(ids, cfg.mlm_ratio, mask_rng, len(vocab))
            batch = PretrainBatch(corrupted, mask, bi, pi, originals, targets)
            model.zero_grad()
            loss = pretrain_loss(model, batch, weights, drop_rng)
            _check_finite(loss.total, "pretrain", [items[i].id for i in idx])
            T.backward(loss.total)
            step += 1
            lr = lr_at(step, total, sched.lr, sched.warmup)
            opt.step(lr)
            rec = {"stage": "pretrain", "epoch": epoch, "step": step, "lr": lr,
                   "loss": float(loss.total.data), **loss.parts}
            for key, val in rec.items():
                if key not in ("stage", "epoch", "step", "lr"):
                    sums[key] = sums.get(key, 0.0) + val
            if on_record:
                on_record(rec)
        steps = math.ceil(n / sched.batch_size)
        summary = {"stage": "pretrain", "epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        result.history.append(summary)
        log.info("pretrain epoch %d: %s", epoch, {k: round(v, 4) for k, v in summary.items() if k != "stage"})
        if out is not None:
            path = out / "ckpt" / f"epoch-{epoch:03d}.ckpt"
            save_checkpoint(path, model.params, checkpoint_header(model, cfg, "pretrain", epoch))
            result.checkpoints.append(path)
    return result


def _stream(seed: int, name: str) -> int:
    """Independent, reproducible sub-seed per purpose."""
    h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------- finetune

@dataclass
class QueryPlan:
    query_texts: list[str]
    positives: list[list[int]]  # item indices
    negatives: list[list[int]]  # ranked hard-negative candidates


def mine_hard_negatives(model: MultiAspectModel, cfg: RunConfig, items: Sequence[ItemRecord],
                        query_texts: list[str], exact: list[set[int]], depth: int = 8) -> list[list[int]]:
    """Highest-scoring non-Exact items for each query under the current model."""
    index = DenseIndex.build(model, items, cfg)
    q = model.embed_texts(query_texts, cfg.query_max_len)
    out = []
    for qi in range(len(query_texts)):
        ranked = index.search(q[qi], min(len(items), depth + len(exact[qi])))
        out.append([index.position[iid] for iid, _ in ranked if index.position[iid] not in exact[qi]][:depth])
    return out


def plan_queries(model: MultiAspectModel, cfg: RunConfig, items: Sequence[ItemRecord],
                 queries: Sequence[QueryRecord], qrels: Sequence[QrelRecord]) -> QueryPlan:
    pos_of = {it.id: i for i, it in enumerate(items)}
    text_of = {q.id: q.text for q in queries}
    exact: dict[str, set[int]] = {}
    for r in qrels:
        if r.split == "train" and r.label == "E":
            exact.setdefault(r.query_id, set()).add(pos_of[r.item_id])
    qids = sorted(exact)
    texts = [text_of[q] for q in qids]
    ex = [exact[q] for q in qids]
    negs = mine_hard_negatives(model, cfg, items, texts, ex)
    return QueryPlan(texts, [sorted(e) for e in ex], negs)


def _relevance_batches(plan: QueryPlan, batch_size: int, rng: np.random.Generator):
    """Yield (query idx, positive item idx, negative item idx) triples with distinct items."""
    pending = list(rng.permutation(len(plan.query_texts)))
    while len(pending) >= 2:
        used: set[int] = set()
        batch: list[tuple[int, int, int]] = []
        deferred = []
        for qi in pending:
            if len(batch) == batch_size:
                deferred.append(qi)
                continue
            pos = [p for p in plan.positives[qi] if p not in used]
            if not pos:
                deferred.append(qi)
                continue
            p = pos[rng.integers(len(pos))]
            neg = next((x for x in plan.negatives[qi] if x not in used and x != p), None)
            if neg is None:
                deferred.append(qi)
                continue
            used.update((p, neg))
            batch.append((qi, p, neg))
        if len(batch) < 2:
            return
        yield batch
        if len(deferred) == len(pending):
            return
        pending = deferred


def finetune(cfg: RunConfig, model: MultiAspectModel, items: Sequence[ItemRecord],
             queries: Sequence[QueryRecord], qrels: Sequence[QrelRecord], out_dir: str | Path | None = None,
             on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Relevance fine-tuning with in-batch + hard negatives; keeps the best dev checkpoint.

    Dev R@K is evaluated every ``eval_every`` epochs (and at epoch 0 for
    reference); the returned model holds the best evaluated epoch >= 1, ties
    going to the earliest.
    """
    cfg.validate()
    check_qrels(qrels, items, queries)
    if not any(r.split == "train" and r.label == "E" for r in qrels):
        raise IngestError("qrels contain no Exact judgments in the train split")
    enc = encode_items(items, model, cfg)
    plan = plan_queries(model, cfg, items, queries, qrels)
    rng = np.random.default_rng(_stream(cfg.seed, "finetune-order"))
    drop_rng = np.random.default_rng(_stream(cfg.seed, "finetune-dropout"))
    weights = cfg.loss_weights()
    sched = cfg.finetune
    steps_per_epoch = max(1, len(plan.query_texts) // sched.batch_size)
    total = steps_per_epoch * sched.epochs
    opt = Adam(model.params)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        save_run_files(out, cfg, model)
        (out / "ckpt").mkdir(exist_ok=True)
    has_dev = any(r.split == "dev" for r in qrels)

    def evaluate(epoch: int) -> float | None:
        if not has_dev:
            return None
        rep = evaluate_split(model, cfg, items, queries, qrels, "dev", metrics=(("recall", sched.select_k),))
        score = rep.mean(f"R@{sched.select_k}")
        result.history.append({"stage": "finetune-eval", "epoch": epoch, f"dev_R@{sched.select_k}": score})
        log.info("finetune epoch %d: dev R@%d = %.4f", epoch, sched.select_k, score)
        return score

    evaluate(0)
    best = None
    step = 0
    for epoch in range(1, sched.epochs + 1):
        for batch in _relevance_batches(plan, sched.batch_size, rng):
            qi = [b[0] for b in batch]
            item_idx = [b[1] for b in batch] + [b[2] for b in batch]
            q_ids, q_mask = model.batch_ids([plan.query_texts[i] for i in qi], cfg.query_max_len)
            i_ids, i_mask, targets = enc.batch(item_idx, model.min_width, model.config.encoder.max_len)
            rb = RelevanceBatch(q_ids, q_mask, i_ids, i_mask, targets, len(batch))
            model.zero_grad()
            loss = finetune_loss(model, rb, weights, drop_rng)
            _check_finite(loss.total, "finetune", [items[i].id for i in item_idx])
            T.backward(loss.total)
            step += 1
            lr = lr_at(min(step, total), total, sched.lr, sched.warmup)
            opt.step(lr)
            rec = {"stage": "finetune", "epoch": epoch, "step": step, "lr": lr,
                   "loss": float(loss.total.data), **loss.parts}
            if on_record:
                on_record(rec)
        if epoch % sched.eval_every == 0 or epoch == sched.epochs:
            score = evaluate(epoch)
            if out is not None:
                path = out / "ckpt" / f"epoch-{epoch:03d}.ckpt"
                save_checkpoint(path, model.params, checkpoint_header(model, cfg, "finetune", epoch))
                result.checkpoints.append(path)
            if score is None or best is None or score > best[0]:
                best = (score if score is not None else -math.inf, epoch, snapshot(model))
    if best is not None:
        restore(model, best[2])
        result.best_epoch = best[1]
        result.best_score = best[0] if best[0] != -math.inf else None
        if out is not None:
            save_checkpoint(out / "best.ckpt", model.params, checkpoint_header(model, cfg, "finetune", best[1]))
    return result
