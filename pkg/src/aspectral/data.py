"""Corpus/query/qrels files, aspect-string concatenation and the synthetic benchmark."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import IngestError

LABELS = ("E", "S", "C", "I")
GAINS = {"E": 1.0, "S": 0.1, "C": 0.01, "I": 0.0}
SPLITS = ("train", "dev", "test")
DEFAULT_ASPECTS = ("brand", "color", "category")


class SynthConfigError(ValueError):
    pass


@dataclass
class ItemRecord:
    id: str
    title: str
    description: str = ""
    # empty dict: item carries no annotation information at all;
    # a present key with [] records an observed absence
    aspects: dict[str, list[str]] = field(default_factory=dict)

    @property
    def text(self) -> str:
        return f"{self.title} {self.description}".strip()

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "title": self.title, "description": self.description,
                           "aspects": self.aspects}, ensure_ascii=False)


@dataclass
class QueryRecord:
    id: str
    text: str

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "text": self.text}, ensure_ascii=False)


@dataclass(frozen=True)
class QrelRecord:
    query_id: str
    item_id: str
    label: str
    split: str

    def to_line(self) -> str:
        return f"{self.query_id}\t{self.item_id}\t{self.label}\t{self.split}\n"


# ------------------------------------------------------------------ loading

def _read_jsonl(path: str | Path, required: Sequence[str]) -> list[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise IngestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in required if k not in obj]
            if missing:
                raise IngestError(f"{path}:{lineno}: missing field(s) {missing}")
            rows.append((lineno, obj))
    return rows


def _check_unique(path, pairs: Iterable[tuple[int, str]]) -> None:
    seen: dict[str, int] = {}
    for lineno, key in pairs:
        if key in seen:
            raise IngestError(f"{path}:{lineno}: duplicate id {key!r} (first seen on line {seen[key]})")
        seen[key] = lineno


def load_corpus(path: str | Path, aspect_names: Sequence[str] | None = None) -> list[ItemRecord]:
    rows = _read_jsonl(path, ("id", "title"))
    _check_unique(path, ((n, str(o["id"])) for n, o in rows))
    items = []
    for lineno, obj in rows:
        aspects = obj.get("aspects") or {}
        if not isinstance(aspects, dict) or not all(
                isinstance(v, list) and all(isinstance(s, str) for s in v) for v in aspects.values()):
            raise IngestError(f"{path}:{lineno}: 'aspects' must map names to lists of strings")
        if aspect_names is not None:
            unknown = sorted(set(aspects) - set(aspect_names))
            if unknown:
                raise IngestError(f"{path}:{lineno}: unknown aspect(s) {unknown}")
        items.append(ItemRecord(str(obj["id"]), str(obj["title"]), str(obj.get("description", "")),
                                {k: list(v) for k, v in aspects.items()}))
    return items


def load_queries(path: str | Path) -> list[QueryRecord]:
    rows = _read_jsonl(path, ("id", "text"))
    _check_unique(path, ((n, str(o["id"])) for n, o in rows))
    return [QueryRecord(str(o["id"]), str(o["text"])) for _, o in rows]


def load_qrels(path: str | Path) -> list[QrelRecord]:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    out: list[QrelRecord] = []
    seen: dict[tuple[str, str, str], int] = {}
    query_split: dict[str, str] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise IngestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            qid, iid, label, split = parts
            if label not in LABELS:
                raise IngestError(f"{path}:{lineno}: unknown label {label!r} (expected one of {LABELS})")
            if split not in SPLITS:
                raise IngestError(f"{path}:{lineno}: unknown split {split!r}")
            if query_split.setdefault(qid, split) != split:
                raise IngestError(f"{path}:{lineno}: query {qid!r} appears in splits "
                                  f"{query_split[qid]!r} and {split!r}")
            key = (qid, iid, split)
            if key in seen:
                raise IngestError(f"{path}:{lineno}: duplicate judgment for ({qid}, {iid}), "
                                  f"first on line {seen[key]}")
            seen[key] = lineno
            out.append(QrelRecord(qid, iid, label, split))
    return out


def check_qrels(qrels: Sequence[QrelRecord], items: Sequence[ItemRecord],
                queries: Sequence[QueryRecord]) -> None:
    item_ids = {it.id for it in items}
    query_ids = {q.id for q in queries}
    missing_items = sorted({r.item_id for r in qrels} - item_ids)
    missing_queries = sorted({r.query_id for r in qrels} - query_ids)
    if missing_items or missing_queries:
        raise IngestError(f"qrels reference unknown ids: items {missing_items[:20]}, "
                          f"queries {missing_queries[:20]}")


def save_corpus(items: Sequence[ItemRecord], path: str | Path) -> None:
    _atomic_write(path, "".join(it.to_json() + "\n" for it in items))


def save_queries(queries: Sequence[QueryRecord], path: str | Path) -> None:
    _atomic_write(path, "".join(q.to_json() + "\n" for q in queries))


def save_qrels(qrels: Sequence[QrelRecord], path: str | Path) -> None:
    _atomic_write(path, "".join(r.to_line() for r in qrels))


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def judgments_by_query(qrels: Iterable[QrelRecord], split: str | None = None) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for r in qrels:
        if split is None or r.split == split:
            out.setdefault(r.query_id, {})[r.item_id] = r.label
    return out


# --------------------------------------------------------------- transforms

def indicator_token(aspect: str) -> str:
    return f"[a_{aspect.lower()}]"


def concat_aspects(item: ItemRecord, aspect_order: Sequence[str]) -> str:
    """Item text followed by ``[a_<name>] values`` for each annotated aspect."""
    parts = [item.text]
    for a in aspect_order:
        vals = item.aspects.get(a) or []
        if vals:
            parts.append(indicator_token(a) + " " + " ".join(vals))
    return " ".join(p for p in parts if p)


def annotated_ids(items: Sequence[ItemRecord]) -> list[int]:
    """Items carrying annotation information (even if every value list is empty)."""
    return [i for i, it in enumerate(items) if it.aspects]


def restrict_annotations(items: Sequence[ItemRecord], fraction: float, seed: int) -> list[ItemRecord]:
    """Keep annotations on a seeded ceil(fraction * n) subset of annotated items.

    The shuffle depends only on the seed and the annotated item count, so a
    smaller fraction's subset is a prefix of a larger one's.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    annotated = annotated_ids(items)
    order = np.random.default_rng(seed).permutation(len(annotated))
    keep = {annotated[j] for j in order[: math.ceil(fraction * len(annotated) - 1e-9)]}
    out = []
    for i, it in enumerate(items):
        aspects = {k: list(v) for k, v in it.aspects.items()} if i in keep else {}
        out.append(ItemRecord(it.id, it.title, it.description, aspects))
    return out


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 2000
    n_train: int = 400
    n_dev: int = 100
    n_test: int = 100
    coverage: tuple[float, float, float] = (0.94, 0.67, 0.87)
    n_brands: int = 50
    n_colors: int = 20
    n_categories: int = 30
    zipf: float = 1.1
    words_per_category: int = 8
    specific_pool: int = 800
    noise_pool: int = 150
    mention_brand: float = 0.6
    mention_color: float = 0.6
    query_brand: float = 0.5
    query_color: float = 0.3
    judged_per_query: int = 20

    def validate(self) -> None:
        if self.n_items < 100:
            raise SynthConfigError(f"n_items must be >= 100, got {self.n_items}")
        if self.n_train + self.n_dev + self.n_test < 20:
            raise SynthConfigError("need at least 20 queries in total")
        if any(not 0 <= c <= 1 for c in self.coverage):
            raise SynthConfigError(f"coverage values must be in [0, 1], got {self.coverage}")


_ONSETS = ("b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "dr", "fl", "gr", "kr", "pl", "sh", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou", "ea")


def _pseudo_words(rng: np.random.Generator, n: int, syllables: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                     for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _zipf_probs(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def synth_gen(seed: int, cfg: SynthConfig = SynthConfig()):
    """Seeded aspect-correlated benchmark: (items, queries, qrels).

    Items draw latent (brand, color, category) from Zipfian vocabularies.
    Titles mention brand/color words with some probability and always carry
    category-topical words plus two item-specific words; annotations are
    revealed per aspect with the coverage probabilities. A query is built
    from its target item's words. Labels: target E, same category and brand
    S, same category C, otherwise I.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    brands = _pseudo_words(rng, cfg.n_brands, 2, taken)
    colors = _pseudo_words(rng, cfg.n_colors, 3, taken)
    cat_names = _pseudo_words(rng, cfg.n_categories, 2, taken)
    topical = [_pseudo_words(rng, cfg.words_per_category, 2, taken) for _ in range(cfg.n_categories)]
    specific = _pseudo_words(rng, cfg.specific_pool, 3, taken)
    noise = _pseudo_words(rng, cfg.noise_pool, 1 + 1, taken)

    pb = _zipf_probs(cfg.n_brands, cfg.zipf)
    pc = _zipf_probs(cfg.n_colors, cfg.zipf)
    pk = _zipf_probs(cfg.n_categories, cfg.zipf)
    n = cfg.n_items
    lat_b = rng.choice(cfg.n_brands, size=n, p=pb)
    lat_c = rng.choice(cfg.n_colors, size=n, p=pc)
    lat_k = rng.choice(cfg.n_categories, size=n, p=pk)
    spec = np.stack([rng.choice(cfg.specific_pool, size=2, replace=False) for _ in range(n)])

    items: list[ItemRecord] = []
    for i in range(n):
        b, c, k = lat_b[i], lat_c[i], lat_k[i]
        tw = topical[k]
        picks = rng.choice(len(tw), size=3, replace=False)
        title = []
        if rng.random() < cfg.mention_brand:
            title.append(brands[b])
        title += [tw[picks[0]], specific[spec[i, 0]]]
        if rng.random() < cfg.mention_color:
            title.append(colors[c])
        title += [tw[picks[1]], specific[spec[i, 1]]]
        desc = [tw[picks[2]]] + [noise[j] for j in rng.choice(cfg.noise_pool, size=int(rng.integers(3, 7)))]
        desc = [desc[j] for j in rng.permutation(len(desc))]
        aspects = {}
        for name, value, cov in (("brand", brands[b], cfg.coverage[0]), ("color", colors[c], cfg.coverage[1]),
                                 ("category", cat_names[k], cfg.coverage[2])):
            aspects[name] = [value] if rng.random() < cov else []
        items.append(ItemRecord(f"i{i:05d}", " ".join(title), " ".join(desc), aspects))

    by_cat: dict[int, list[int]] = {}
    for i in range(n):
        by_cat.setdefault(int(lat_k[i]), []).append(i)

    n_q = cfg.n_train + cfg.n_dev + cfg.n_test
    targets = rng.choice(n, size=n_q, replace=n_q > n)
    queries: list[QueryRecord] = []
    judged: list[dict[int, str]] = []
    for qi, t in enumerate(targets):
        b, c, k = lat_b[t], lat_c[t], lat_k[t]
        words = [specific[spec[t, rng.integers(2)]], topical[k][rng.integers(cfg.words_per_category)]]
        if rng.random() < cfg.query_brand:
            words.append(brands[b])
        if rng.random() < cfg.query_color:
            words.append(colors[c])
        words = [words[j] for j in rng.permutation(len(words))]
        queries.append(QueryRecord(f"q{qi:05d}", " ".join(words)))

        labels = {int(t): "E"}
        same_cat = [j for j in by_cat[int(k)] if j != t]
        subs = [j for j in same_cat if lat_b[j] == b]
        comps = [j for j in same_cat if lat_b[j] != b]
        budget = cfg.judged_per_query - 1
        for pool, share, lab in ((subs, 0.3, "S"), (comps, 0.4, "C")):
            take = min(len(pool), int(round(share * budget)))
            for j in rng.choice(pool, size=take, replace=False) if take else []:
                labels[int(j)] = lab
        n_irr = max(1, cfg.judged_per_query - len(labels))
        while n_irr:
            j = int(rng.integers(n))
            if lat_k[j] != k and j not in labels:
                labels[j] = "I"
                n_irr -= 1
        judged.append(labels)

    # split by hash of the query id: deterministic, independent of generation order
    order = sorted(range(n_q), key=lambda qi: hashlib.sha256(queries[qi].id.encode()).hexdigest())
    split_of = {}
    for rank, qi in enumerate(order):
        split_of[qi] = "train" if rank < cfg.n_train else ("dev" if rank < cfg.n_train + cfg.n_dev else "test")
    qrels = [QrelRecord(queries[qi].id, items[j].id, lab, split_of[qi])
             for qi in range(n_q) for j, lab in sorted(judged[qi].items())]
    return items, queries, qrels


def write_dataset(out_dir: str | Path, items, queries, qrels) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(items, out / "corpus.jsonl")
    save_queries(queries, out / "queries.jsonl")
    save_qrels(qrels, out / "qrels.tsv")
