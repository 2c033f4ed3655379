"""Aspect representation variants: where the k aspect embeddings come from.

Each variant returns the explicit aspect rows ``[B, k, H]`` in schema order
and, when it can host one, an extra row used as the OTHER fusion slot.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput, attention_weights, merge_heads, split_heads
from .tensor import Tensor
from .vocab import CLS, PAD, SEP

REUSE_CLS, EXTRA_K, FIRST_K, RANDOM_K = "reuse_cls", "extra_k", "first_k", "random_k"
VARIANTS = (REUSE_CLS, EXTRA_K, FIRST_K, RANDOM_K)

DEFAULT_RANDOM_POSITIONS = (3, 9, 15, 7)


class ReprConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AspectReprVariant:
    kind: str = EXTRA_K
    # aspect names in position order: first entry sits at content position 1
    first_k_order: tuple[str, ...] = ()
    # one position per aspect in schema order, optionally one more for OTHER
    random_k_positions: tuple[int, ...] = DEFAULT_RANDOM_POSITIONS

    def validate(self, aspects: list[str], max_len: int) -> None:
        if self.kind not in VARIANTS:
            raise ReprConfigError(f"unknown aspect_repr {self.kind!r}; choose from {VARIANTS}")
        if self.kind == FIRST_K and self.first_k_order:
            if sorted(self.first_k_order) != sorted(aspects):
                raise ReprConfigError(f"first_k_order {self.first_k_order} is not a permutation of {aspects}")
        if self.kind == RANDOM_K:
            pos = self.random_k_positions
            if len(set(pos)) != len(pos):
                raise ReprConfigError(f"random_k_positions {pos} contain duplicates")
            if len(pos) < len(aspects):
                raise ReprConfigError(f"need at least {len(aspects)} random_k_positions, got {len(pos)}")
            if min(pos) < 1 or max(pos) >= max_len:
                raise ReprConfigError(f"random_k_positions {pos} must lie in [1, {max_len})")

    def positions(self, aspects: list[str]) -> tuple[list[int], int | None]:
        """Token positions for each aspect (schema order) and for OTHER."""
        k = len(aspects)
        if self.kind == FIRST_K:
            order = list(self.first_k_order) or list(aspects)
            return [order.index(a) + 1 for a in aspects], k + 1
        if self.kind == RANDOM_K:
            pos = list(self.random_k_positions)
            return pos[:k], (pos[k] if len(pos) > k else None)
        raise ReprConfigError(f"{self.kind} does not read fixed positions")

    def hosts_other(self, aspects: list[str]) -> bool:
        if self.kind == REUSE_CLS:
            return False
        if self.kind == RANDOM_K:
            return len(self.random_k_positions) > len(aspects)
        return True

    def min_width(self, aspects: list[str]) -> int:
        """Padded width a batch needs so every read position exists."""
        if self.kind in (FIRST_K, RANDOM_K):
            pos, other = self.positions(aspects)
            return max(pos + ([other] if other is not None else [])) + 1
        return 0


@dataclass
class AspectEmbeddings:
    rows: Tensor  # [B, k, H] explicit aspects in schema order
    other: Tensor | None = None  # [B, H]
    attention: np.ndarray | None = None  # ExtraK weights [B, heads, k(+1), n]


@dataclass
class ReprStats:
    short_sequence: Counter = field(default_factory=Counter)


def content_mask(ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keys for aspect attention: content tokens only (no CLS/SEP/PAD).

    A sequence without content tokens falls back to its full attention mask.
    """
    cm = (mask != 0) & (ids != CLS) & (ids != SEP) & (ids != PAD)
    empty = ~cm.any(axis=1)
    cm[empty] = mask[empty] != 0
    return cm


def represent_reuse_cls(enc: EncoderOutput, k: int) -> AspectEmbeddings:
    B, H = enc.cls.shape
    rows = T.reshape(T.concat([enc.cls] * k, axis=1), (B, k, H))
    return AspectEmbeddings(rows=rows)


def represent_extra_k(enc: EncoderOutput, queries: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                      keys_mask: np.ndarray, heads: int, k: int) -> AspectEmbeddings:
    """Learned aspect queries attend over the encoded content tokens.

    ``queries`` has ``k`` rows, or ``k + 1`` with the last one for OTHER.
    """
    B = enc.hidden.shape[0]
    q = T.expand(T.matmul(queries, wq), B)
    kx = T.matmul(enc.hidden, wk)
    vx = T.matmul(enc.hidden, wv)
    qh, kh, vh = split_heads(q, heads), split_heads(kx, heads), split_heads(vx, heads)
    weights = attention_weights(qh, kh, keys_mask)
    out = merge_heads(T.matmul(weights, vh))
    rows = out[:, :k]
    other = out[:, k] if queries.shape[0] > k else None
    return AspectEmbeddings(rows=rows, other=other, attention=weights.data)


def _read_positions(enc: EncoderOutput, positions: list[int], stats: ReprStats | None) -> Tensor:
    real_len = enc.mask.sum(axis=1)
    if stats is not None:
        # content occupies positions 1 .. real_len - 2
        for p in positions:
            short = int((real_len - 1 <= p).sum())
            if short:
                stats.short_sequence[p] += short
    return enc.hidden[:, positions]


def represent_first_k(enc: EncoderOutput, positions: list[int], other_position: int | None = None,
                      stats: ReprStats | None = None) -> AspectEmbeddings:
    rows = _read_positions(enc, positions, stats)
    other = None
    if other_position is not None:
        other = _read_positions(enc, [other_position], stats)[:, 0]
    return AspectEmbeddings(rows=rows, other=other)


def represent_random_k(enc: EncoderOutput, positions: list[int], other_position: int | None = None,
                       stats: ReprStats | None = None) -> AspectEmbeddings:
    if len(set(positions + ([other_position] if other_position is not None else []))) != \
            len(positions) + (other_position is not None):
        raise ReprConfigError(f"duplicate positions {positions} / {other_position}")
    return represent_first_k(enc, positions, other_position, stats)
