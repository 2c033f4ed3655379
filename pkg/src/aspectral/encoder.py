"""Mini BERT-style transformer encoder shared by queries and items."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .vocab import TokenSequence


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 32
    layers: int = 2
    heads: int = 2
    ff_dim: int = 64
    max_len: int = 48
    vocab_size: int = 1000
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")


@dataclass
class EncoderOutput:
    hidden: Tensor  # [B, n, H]
    cls: Tensor  # [B, H], row 0 of every sequence
    mask: np.ndarray  # [B, n]


def _normal(rng, shape, dtype, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(dtype)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    H, F = cfg.hidden, cfg.ff_dim
    p: dict[str, np.ndarray] = {
        "emb.tok": _normal(rng, (cfg.vocab_size, H), dtype),
        "emb.pos": _normal(rng, (cfg.max_len, H), dtype),
        "emb.ln.g": np.ones(H, dtype),
        "emb.ln.b": np.zeros(H, dtype),
    }
    for i in range(cfg.layers):
        pre = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.{name}.w"] = _normal(rng, (H, H), dtype)
            p[pre + f"attn.{name}.b"] = np.zeros(H, dtype)
        p[pre + "ln1.g"] = np.ones(H, dtype)
        p[pre + "ln1.b"] = np.zeros(H, dtype)
        p[pre + "ff1.w"] = _normal(rng, (H, F), dtype)
        p[pre + "ff1.b"] = np.zeros(F, dtype)
        p[pre + "ff2.w"] = _normal(rng, (F, H), dtype)
        p[pre + "ff2.b"] = np.zeros(H, dtype)
        p[pre + "ln2.g"] = np.ones(H, dtype)
        p[pre + "ln2.b"] = np.zeros(H, dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, n, H] -> [B, heads, n, H/heads]"""
    B, n, H = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, H // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * d))


def attention_weights(q: Tensor, k: Tensor, key_mask: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d)) per head over unmasked keys; q, k are [B, h, n, d]."""
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    return T.masked_softmax(scores, key_mask[:, None, None, :])


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, heads: int) -> Tensor:
    """Scaled dot-product attention on already-projected [B, n, H] inputs.

    Returns the concatenated head outputs ``[B, n_q, H]``; any output
    projection is the caller's business.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    weights = attention_weights(qh, kh, key_mask)
    return merge_heads(T.matmul(weights, vh))


def _self_attention(x: Tensor, p: dict[str, Tensor], pre: str, mask: np.ndarray, heads: int) -> Tensor:
    q = T.linear(x, p[pre + "attn.q.w"], p[pre + "attn.q.b"])
    k = T.linear(x, p[pre + "attn.k.w"], p[pre + "attn.k.b"])
    v = T.linear(x, p[pre + "attn.v.w"], p[pre + "attn.v.b"])
    ctx = multi_head_attention(q, k, v, mask, heads)
    return T.linear(ctx, p[pre + "attn.o.w"], p[pre + "attn.o.b"])


def encode_batch(ids: np.ndarray, mask: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig,
                 rng: np.random.Generator | None = None) -> EncoderOutput:
    """Post-LN transformer over a padded batch ``ids [B, n]``."""
    ids = np.asarray(ids)
    mask = np.asarray(mask)
    B, n = ids.shape
    if n > cfg.max_len:
        raise ContractError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    drop = cfg.dropout if rng is not None else 0.0
    x = T.embedding_lookup(params["emb.tok"], ids)
    x = T.layer_norm(T.add(x, params["emb.pos"][:n]), params["emb.ln.g"], params["emb.ln.b"])
    x = T.dropout(x, drop, rng)
    for i in range(cfg.layers):
        pre = f"layer{i}."
        att = T.dropout(_self_attention(x, params, pre, mask, cfg.heads), drop, rng)
        x = T.layer_norm(T.add(x, att), params[pre + "ln1.g"], params[pre + "ln1.b"])
        ff = T.gelu(T.linear(x, params[pre + "ff1.w"], params[pre + "ff1.b"]))
        ff = T.dropout(T.linear(ff, params[pre + "ff2.w"], params[pre + "ff2.b"]), drop, rng)
        x = T.layer_norm(T.add(x, ff), params[pre + "ln2.g"], params[pre + "ln2.b"])
    return EncoderOutput(hidden=x, cls=x[:, 0], mask=mask)


def encode_sequence(seq: TokenSequence, params: dict[str, Tensor], cfg: EncoderConfig) -> EncoderOutput:
    return encode_batch(seq.ids[None, :], seq.mask[None, :], params, cfg)
