"""Method recipes, single-cell experiment runs and the ablation grid runner.

A *cell* is one (config, dataset) pair: pre-train (cached on the settings
that affect pre-training), fine-tune, then score the test split and the
aspect-prediction accuracy. The ablation grid crosses the variant selectors
and writes one combined row per combination, averaged over seeds.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .data import ItemRecord, QrelRecord, QueryRecord, SynthConfig, synth_gen
from .fusion import FusionConfigError
from .aspect_repr import ReprConfigError
from .retrieval import DEFAULT_METRICS, aspect_accuracy_at_k, evaluate_split
from .training import finetune, pretrain, restore, snapshot

log = logging.getLogger(__name__)

EN_V2_ORDER = ("category", "color", "brand")

# Aspect-loss scale used by the method recipes. The library default (0.1) is
# tuned for a pre-trained BERT; a from-scratch desk encoder needs a larger
# share of aspect loss (still within the 0..0.5 tuning range) before brand and
# color predictions rise above the value-frequency prior.
DESK_LAMBDA_P = 0.5

# Overrides on top of a base RunConfig for each compared method.
METHODS: dict[str, dict[str, Any]] = {
    "bibert": {"aspect_repr": "reuse_cls", "lambda_p": 0.0, "fusion_objects": "none"},
    "bibert-concat": {"aspect_repr": "reuse_cls", "lambda_p": 0.0, "fusion_objects": "none",
                      "concat_aspects": True},
    "mtbert": {"aspect_repr": "reuse_cls", "lambda_p": DESK_LAMBDA_P, "fusion_objects": "none"},
    "madral-ori": {"aspect_repr": "extra_k", "lambda_p": DESK_LAMBDA_P, "use_app": True,
                   "fusion_objects": "other", "weighting": "presence"},
    "madral-en-v1": {"aspect_repr": "extra_k", "lambda_p": DESK_LAMBDA_P, "use_app": True,
                     "fusion_objects": "cls", "weighting": "presence"},
    "madral-en-v2": {"aspect_repr": "first_k", "first_k_order": list(EN_V2_ORDER), "lambda_p": DESK_LAMBDA_P,
                     "use_app": True, "fusion_objects": "cls", "weighting": "cls_gating"},
    "cls-only": {"aspect_repr": "extra_k", "lambda_p": DESK_LAMBDA_P, "use_app": True, "fusion_objects": "none"},
}

# Settings that only matter after pre-training; everything else keys the cache.
FINETUNE_ONLY = ("fusion_objects", "weighting", "lambda_f")

GRID_AXES = ("aspect_repr", "weighting", "fusion_objects", "lambda_f", "annotation_fraction")


def method_config(name: str, base: RunConfig | None = None, **extra: Any) -> RunConfig:
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; known: {', '.join(sorted(METHODS))}")
    return (base or RunConfig()).with_overrides({**METHODS[name], **extra})


def pretrain_key(cfg: RunConfig) -> str:
    flat = {k: v for k, v in cfg.to_flat().items()
            if k not in FINETUNE_ONLY and not k.startswith("finetune.")}
    return json.dumps(flat, sort_keys=True)


@dataclass
class Dataset:
    items: list[ItemRecord]
    queries: list[QueryRecord]
    qrels: list[QrelRecord]


def synthetic_dataset(seed: int, synth: SynthConfig | None = None) -> Dataset:
    return Dataset(*synth_gen(seed, synth or SynthConfig()))


@dataclass
class CellResult:
    metrics: dict[str, float]
    accuracy: dict[str, float]
    best_epoch: int | None
    dev_score: float | None
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)


class PretrainCache:
    """In-memory cache of pre-trained parameters keyed by :func:`pretrain_key`."""

    def __init__(self):
        self._store: dict[tuple[str, int], tuple[Any, dict[str, np.ndarray]]] = {}

    def get(self, cfg: RunConfig, data: Dataset):
        key = (pretrain_key(cfg), id(data))
        if key not in self._store:
            res = pretrain(cfg, data.items)
            self._store[key] = (res.model, snapshot(res.model))
        return self._store[key]


def run_cell(cfg: RunConfig, data: Dataset, cache: PretrainCache | None = None,
             accuracy_k: int = 3) -> CellResult:
    """Pre-train (or reuse), fine-tune and evaluate one configuration on ``data``."""
    cache = cache or PretrainCache()
    cfg.validate()
    base, snap = cache.get(cfg, data)
    model = base.with_config(fusion_objects=cfg.fusion_objects, weighting=cfg.weighting)
    restore(model, snap)
    try:
        ft = finetune(cfg, model, data.items, data.queries, data.qrels)
        rep = evaluate_split(ft.model, cfg, data.items, data.queries, data.qrels, "test", DEFAULT_METRICS)
        acc = aspect_accuracy_at_k(ft.model, cfg, data.items, k=accuracy_k)
    finally:
        # the cached model shares parameter objects with ``model``
        restore(base, snap)
    return CellResult({m: rep.mean(m) for m in rep.per_query}, acc, ft.best_epoch, ft.best_score,
                      rep.per_query)


# ------------------------------------------------------------------- grids

@dataclass(frozen=True)
class Matrix:
    axes: dict[str, tuple]
    seeds: tuple[int, ...] = (0,)

    def cells(self) -> list[dict[str, Any]]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


def matrix_from_flat(flat: Mapping[str, Any], base: RunConfig) -> Matrix:
    """``grid.<axis> = [..]`` entries and ``seeds = [..]``; absent axes use the base value."""
    axes: dict[str, tuple] = {}
    seeds = (base.seed,)
    for key, value in flat.items():
        if key == "seeds":
            seeds = tuple(int(s) for s in (value if isinstance(value, list) else [value]))
            continue
        head, _, axis = key.partition(".")
        if head != "grid" or axis not in GRID_AXES:
            raise ConfigError(f"unknown matrix key {key!r}; expected seeds or grid.<{'|'.join(GRID_AXES)}>")
        axes[axis] = tuple(value if isinstance(value, list) else [value])
        if not axes[axis]:
            raise ConfigError(f"matrix key {key!r} is empty")
    for axis in GRID_AXES:
        axes.setdefault(axis, (getattr(base, axis),))
    return Matrix({a: axes[a] for a in GRID_AXES}, seeds)


def _run_group(args):
    """Worker: all cells sharing one seed (so they share the dataset and pre-training cache)."""
    base_flat, seed, cells, data = args
    base = RunConfig().with_overrides({**base_flat, "seed": seed})
    data = data or synthetic_dataset(seed)
    cache = PretrainCache()
    out = []
    for cell in cells:
        try:
            cfg = base.with_overrides(cell)
            cfg.validate()
        except (ConfigError, FusionConfigError, ReprConfigError, ValueError) as exc:
            out.append((cell, None, str(exc)))
            continue
        res = run_cell(cfg, data, cache)
        out.append((cell, res, None))
        log.info("seed %d cell %s: %s", seed, cell, {k: round(v, 4) for k, v in res.metrics.items()})
    return seed, out


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("ASPECTRAL_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))


def run_grid(base: RunConfig, matrix: Matrix, data: Dataset | None = None) -> list[dict[str, Any]]:
    """One row per grid combination, metrics averaged over seeds; invalid combos flagged."""
    cells = matrix.cells()
    tasks = [(base.to_flat(), seed, cells, data) for seed in matrix.seeds]
    workers = worker_count(len(tasks))
    if workers == 1:
        results = [_run_group(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, tasks))
    results.sort(key=lambda r: matrix.seeds.index(r[0]))
    rows = []
    for ci, cell in enumerate(cells):
        outcomes = [res[1][ci] for res in results]
        row: dict[str, Any] = dict(cell)
        errors = [e for _, _, e in outcomes if e]
        if errors:
            row.update({"status": "invalid", "reason": errors[0], "n_seeds": 0})
        else:
            row.update({"status": "ok", "n_seeds": len(outcomes)})
            for metric in outcomes[0][1].metrics:
                row[metric] = float(np.mean([r.metrics[metric] for _, r, _ in outcomes]))
            for aspect in outcomes[0][1].accuracy:
                vals = [r.accuracy[aspect] for _, r, _ in outcomes]
                row[f"acc@3.{aspect}"] = float(np.mean(vals)) if not any(map(math.isnan, vals)) else math.nan
        rows.append(row)
    return rows


def format_table(rows: Sequence[Mapping[str, Any]]) -> str:
    if not rows:
        return ""
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols and c != "reason")
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
