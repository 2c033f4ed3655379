"""Dense index, exact top-K search and ranking/aspect metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .data import GAINS, ItemRecord, QrelRecord, QueryRecord, judgments_by_query
from .stats import paired_t_test
from .tensor import ContractError, no_grad

if TYPE_CHECKING:
    from .config import RunConfig
    from .model import MultiAspectModel

DEFAULT_METRICS = (("recall", 100), ("recall", 500), ("ndcg", 10), ("ndcg", 50))


@dataclass
class DenseIndex:
    ids: list[str]
    vectors: np.ndarray  # [N, H]
    digest: str = ""
    position: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise ContractError(f"{len(self.ids)} ids for {self.vectors.shape[0]} vectors")
        self.position = {iid: i for i, iid in enumerate(self.ids)}
        # tie-break rank: smaller item id first
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))

    @classmethod
    def build(cls, model: "MultiAspectModel", items: Sequence[ItemRecord], cfg: "RunConfig") -> "DenseIndex":
        from .training import item_texts

        vecs = model.embed_texts(item_texts(items, cfg), cfg.item_max_len)
        return cls([it.id for it in items], vecs, model.architecture_digest())

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        return search(self, query, k)


def search(index: DenseIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product, descending; ties go to the smaller item id."""
    n = len(index.ids)
    if n == 0:
        raise ContractError("cannot search an empty index")
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must be in [1, {n}]")
    scores = index.vectors @ np.asarray(query, dtype=index.vectors.dtype)
    if k < n:
        # the k-th best score; keep everything tied with it so tie-breaking is exact
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((index._id_rank[cand], -scores[cand]))][:k]
    return [(index.ids[i], float(scores[i])) for i in order]


# ------------------------------------------------------------------ metrics

def recall_at_k(ranked: Sequence[str], judgments: Mapping[str, str], k: int) -> float | None:
    """Share of Exact items in the top k; ``None`` if the query has no Exact item."""
    exact = {i for i, lab in judgments.items() if lab == "E"}
    if not exact:
        return None
    return len(exact.intersection(ranked[:k])) / len(exact)


def dcg(gains: Iterable[float]) -> float:
    return float(sum(g / math.log2(r + 1) for r, g in enumerate(gains, 1)))


def ndcg_at_k(ranked: Sequence[str], judgments: Mapping[str, str], k: int) -> float | None:
    """ESCI-graded NDCG; unjudged items gain 0. ``None`` if no positive-gain judgment."""
    ideal = sorted((GAINS[lab] for lab in judgments.values()), reverse=True)[:k]
    idcg = dcg(ideal)
    if idcg <= 0:
        return None
    return dcg(GAINS[judgments[i]] if i in judgments else 0.0 for i in ranked[:k]) / idcg


METRIC_FUNCS = {"recall": recall_at_k, "ndcg": ndcg_at_k}


def metric_name(kind: str, k: int) -> str:
    return f"{'R' if kind == 'recall' else 'NDCG'}@{k}"


@dataclass
class MetricsReport:
    per_query: dict[str, dict[str, float]]  # metric -> query id -> value
    skipped: dict[str, int]
    n_queries: int

    def mean(self, metric: str) -> float:
        vals = list(self.per_query[metric].values())
        return float(np.mean(vals)) if vals else 0.0

    def records(self, baseline: "MetricsReport | None" = None) -> list[dict]:
        out = []
        for metric, values in self.per_query.items():
            kind, k = metric.split("@")
            p = None
            if baseline is not None and metric in baseline.per_query:
                common = sorted(set(values) & set(baseline.per_query[metric]))
                if len(common) >= 2:
                    p = paired_t_test([values[q] for q in common],
                                      [baseline.per_query[metric][q] for q in common]).p
            out.append({"metric": kind, "K": int(k), "value": round(self.mean(metric), 10),
                        "n_queries": len(values), "skipped": self.skipped.get(metric, 0),
                        "p_vs_baseline": p})
        return out

    def to_jsonl(self, baseline: "MetricsReport | None" = None) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(baseline))

    def table(self, baseline: "MetricsReport | None" = None) -> str:
        lines = [f"{'metric':<10}{'value':>10}{'queries':>9}{'skipped':>9}{'p':>10}"]
        for r in self.records(baseline):
            name = metric_name("recall" if r["metric"] == "R" else "ndcg", r["K"])
            p = "-" if r["p_vs_baseline"] is None else f"{r['p_vs_baseline']:.4f}"
            lines.append(f"{name:<10}{r['value']:>10.4f}{r['n_queries']:>9}{r['skipped']:>9}{p:>10}")
        return "\n".join(lines) + "\n"


def score_rankings(rankings: Mapping[str, Sequence[str]], judged: Mapping[str, Mapping[str, str]],
                   metrics: Sequence[tuple[str, int]] = DEFAULT_METRICS) -> MetricsReport:
    per_query: dict[str, dict[str, float]] = {metric_name(kd, k): {} for kd, k in metrics}
    skipped = {metric_name(kd, k): 0 for kd, k in metrics}
    for qid in sorted(judged):
        ranked = rankings.get(qid, [])
        for kind, k in metrics:
            v = METRIC_FUNCS[kind](ranked, judged[qid], k)
            name = metric_name(kind, k)
            if v is None:
                skipped[name] += 1
            else:
                per_query[name][qid] = v
    return MetricsReport(per_query, skipped, len(judged))


def rank_queries(model: "MultiAspectModel", cfg: "RunConfig", items: Sequence[ItemRecord],
                 queries: Sequence[QueryRecord], qids: Sequence[str], depth: int,
                 index: DenseIndex | None = None) -> dict[str, list[tuple[str, float]]]:
    index = index or DenseIndex.build(model, items, cfg)
    text_of = {q.id: q.text for q in queries}
    with no_grad():
        qv = model.embed_texts([text_of[q] for q in qids], cfg.query_max_len)
    depth = min(depth, len(index.ids))
    return {q: index.search(qv[i], depth) for i, q in enumerate(qids)}


def evaluate_split(model: "MultiAspectModel", cfg: "RunConfig", items: Sequence[ItemRecord],
                   queries: Sequence[QueryRecord], qrels: Sequence[QrelRecord], split: str,
                   metrics: Sequence[tuple[str, int]] = DEFAULT_METRICS,
                   runs_out: dict | None = None) -> MetricsReport:
    judged = judgments_by_query(qrels, split)
    qids = sorted(judged)
    depth = max(k for _, k in metrics)
    ranked = rank_queries(model, cfg, items, queries, qids, depth)
    if runs_out is not None:
        runs_out.update(ranked)
    return score_rankings({q: [i for i, _ in r] for q, r in ranked.items()}, judged, metrics)


# ------------------------------------------------------------ run files

def format_run(ranked: Mapping[str, Sequence[tuple[str, float]]], tag: str = "aspectral") -> str:
    """TREC run format: ``qid Q0 item rank score tag``."""
    lines = []
    for qid in sorted(ranked):
        for rank, (iid, score) in enumerate(ranked[qid], 1):
            lines.append(f"{qid} Q0 {iid} {rank} {score:.8g} {tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_run(text: str) -> dict[str, list[str]]:
    rows: dict[str, list[tuple[int, str]]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            from .vocab import IngestError
            raise IngestError(f"run line {lineno}: expected 'qid Q0 item rank score tag'")
        rows.setdefault(parts[0], []).append((int(parts[3]), parts[2]))
    return {q: [i for _, i in sorted(v)] for q, v in rows.items()}


# -------------------------------------------------------- aspect accuracy

def aspect_accuracy_at_k(model: "MultiAspectModel", cfg: "RunConfig", items: Sequence[ItemRecord],
                         k: int = 3, batch_size: int = 128) -> dict[str, float]:
    """Per aspect: share of annotated items with a true value among the top-k scored values."""
    from .training import item_texts

    texts = item_texts(items, cfg)
    hits = {a: 0 for a in model.schema.aspects}
    counts = {a: 0 for a in model.schema.aspects}
    tables = {a: model.params[f"value.{a}"].data for a in model.schema.aspects}
    with no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            ids, mask = model.batch_ids(texts[start:start + batch_size], cfg.item_max_len)
            enc = model.encode(ids, mask)
            rows = model.represent(enc, ids).rows.data
            for j, a in enumerate(model.schema.aspects):
                scores = rows[:, j] @ tables[a].T
                kk = min(k, scores.shape[1])
                top = np.argsort(-scores, axis=1, kind="stable")[:, :kk]
                for b, it in enumerate(chunk):
                    truth = model.schema.value_ids(a, it.aspects.get(a, []))
                    if not truth:
                        continue
                    counts[a] += 1
                    hits[a] += bool(set(truth).intersection(top[b].tolist()))
    return {a: hits[a] / counts[a] if counts[a] else float("nan") for a in model.schema.aspects}


def accuracy_at_k_from_scores(scores: np.ndarray, truth: Sequence[Sequence[int]], k: int = 3) -> float:
    """Accuracy@k given a precomputed ``[n_items, |V_a|]`` score matrix."""
    kk = min(k, scores.shape[1])
    top = np.argsort(-scores, axis=1, kind="stable")[:, :kk]
    return float(np.mean([bool(set(t).intersection(top[i].tolist())) for i, t in enumerate(truth)]))
