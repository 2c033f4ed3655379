"""Tokenization, content vocabulary and aspect value vocabularies."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[pad]", "[cls]", "[sep]", "[mask]", "[unk]")

# bracketed indicator tokens such as "[a_brand]" survive as single tokens
_TOKEN_RE = re.compile(r"\[[a-z0-9_]+\]|[a-z0-9]+")


class IngestError(ValueError):
    """Input data or vocabulary files are malformed."""


class SchemaError(ValueError):
    """Aspect schema cannot be built or does not match the data."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize_value(value: str) -> str:
    return " ".join(value.lower().split())


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.mask.sum())


class ContentVocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise IngestError("vocabulary must start with the reserved special tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise IngestError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def token_id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, text: str, max_len: int, pad_to: int | None = None) -> TokenSequence:
        """CLS + tokens + SEP, truncated to ``max_len`` and padded to ``pad_to``."""
        if max_len < 2:
            raise ValueError("max_len must be at least 2")
        body = [self.token_id(t) for t in tokenize(text)][: max_len - 2]
        ids = [CLS] + body + [SEP]
        width = max(len(ids), pad_to or 0)
        arr = np.zeros(width, dtype=np.int64)
        arr[: len(ids)] = ids
        mask = (arr != PAD).astype(np.int64)
        return TokenSequence(arr, mask)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i != PAD]

    def to_text(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos))

    @classmethod
    def from_text(cls, text: str) -> "ContentVocab":
        tokens: list[str] = []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) != len(tokens):
                raise IngestError(f"vocab line {lineno}: expected 'token<TAB>{len(tokens)}'")
            tokens.append(parts[0])
        return cls(tokens)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ContentVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable[str], cap: int, reserved: Sequence[str] = ()) -> ContentVocab:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    ``reserved`` words (e.g. aspect indicator tokens) are placed right after
    the special tokens regardless of frequency.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise IngestError("cannot build a vocabulary from an empty corpus")
    tokens = list(SPECIAL_TOKENS) + [r for r in reserved if r not in SPECIAL_TOKENS]
    taken = set(tokens)
    ranked = sorted((t for t in counts if t not in taken), key=lambda t: (-counts[t], t))
    room = max(cap - len(tokens), 0)
    return ContentVocab(tokens + ranked[:room])


@dataclass
class AspectSchema:
    """Ordered aspects and their value vocabularies.

    Aspect order fixes the fusion slot order. Value strings are case-folded.
    """

    aspects: list[str]
    values: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {a: {v: i for i, v in enumerate(self.values[a])} for a in self.aspects}

    @property
    def k(self) -> int:
        return len(self.aspects)

    def size(self, aspect: str) -> int:
        return len(self.values[aspect])

    def value_ids(self, aspect: str, values: Iterable[str]) -> list[int]:
        index = self._index[aspect]
        out = []
        for v in values:
            key = normalize_value(v)
            if key not in index:
                raise SchemaError(f"value {v!r} is not in the vocabulary of aspect {aspect!r}")
            if index[key] not in out:
                out.append(index[key])
        return out

    def to_text(self) -> str:
        lines = ["#aspects\t" + ",".join(self.aspects)]
        for a in self.aspects:
            lines += [f"{a}\t{v}\t{i}" for i, v in enumerate(self.values[a])]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AspectSchema":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#aspects\t"):
            raise IngestError("schema file must start with '#aspects<TAB>name,...'")
        aspects = lines[0].split("\t", 1)[1].split(",")
        values: dict[str, list[str]] = {a: [] for a in aspects}
        for lineno, line in enumerate(lines[1:], 2):
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in values:
                raise IngestError(f"schema line {lineno}: expected 'aspect<TAB>value<TAB>id'")
            a, v, i = parts
            if int(i) != len(values[a]):
                raise IngestError(f"schema line {lineno}: id {i} out of sequence")
            values[a].append(v)
        return cls(aspects, values)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AspectSchema":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_aspect_schema(annotations: Iterable[Mapping[str, Sequence[str]]],
                        aspect_names: Sequence[str]) -> AspectSchema:
    """Collect the distinct (case-folded) values of each aspect, sorted."""
    if not aspect_names:
        raise SchemaError("at least one aspect name is required")
    seen: dict[str, set[str]] = {a: set() for a in aspect_names}
    present: set[str] = set()
    for ann in annotations:
        for a in aspect_names:
            if ann.get(a):
                present.add(a)
                seen[a].update(normalize_value(v) for v in ann[a])
    missing = [a for a in aspect_names if a not in present]
    if missing:
        raise SchemaError(f"aspect(s) {missing} absent from every item")
    return AspectSchema(list(aspect_names), {a: sorted(seen[a]) for a in aspect_names})
