"""Aspect fusion: weight the slot embeddings and sum them into E_X."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

OTHER, CLS_SLOT, NONE = "other", "cls", "none"
FUSION_OBJECTS = (OTHER, CLS_SLOT, NONE)
CLS_GATING, PRESENCE = "cls_gating", "presence"
WEIGHTINGS = (CLS_GATING, PRESENCE)


class FusionConfigError(ValueError):
    pass


@dataclass
class FusedRepresentation:
    embedding: Tensor  # [B, H]
    weights: Tensor | None  # [B, S]; None when CLS is used directly
    slot_names: list[str]
    presence_logits: Tensor | None = None  # [B, S]


def cls_gating_weights(cls: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """softmax(Linear(E_CLS)) over the slots."""
    return T.softmax(T.linear(cls, weight, bias), axis=-1)


def presence_logits(slots: Tensor, heads: Tensor, head_bias: Tensor) -> Tensor:
    """One scalar projection per slot: ``[B, S, H] x [S, H] -> [B, S]``."""
    return T.add(T.sum(T.mul(slots, heads), axis=-1), head_bias)


def presence_weights(slots: Tensor, heads: Tensor, head_bias: Tensor, gamma: Tensor) -> tuple[Tensor, Tensor]:
    """w_a = sigmoid(head_a . E_a) * gamma_a; also returns the presence probabilities."""
    prob = T.sigmoid(presence_logits(slots, heads, head_bias))
    return T.mul(prob, gamma), prob


def fuse(weights: Tensor, slots: Tensor) -> Tensor:
    """E_X = sum_a w_a E_a for ``weights [B, S]`` and ``slots [B, S, H]``."""
    if weights.shape != slots.shape[:2]:
        raise ContractError(f"fuse: {weights.shape} weights for slots of shape {slots.shape}")
    B, S = weights.shape
    return T.reshape(T.matmul(T.reshape(weights, (B, 1, S)), slots), (B, slots.shape[2]))


def build_slots(aspect_rows: Tensor, cls: Tensor, objects: str, other: Tensor | None) -> Tensor | None:
    """Stack the fusion slots; ``None`` means no fusion (use CLS directly)."""
    if objects == NONE:
        return None
    B, k, H = aspect_rows.shape
    if objects == OTHER:
        if other is None:
            raise FusionConfigError("OTHER fusion requested but the aspect representation has no OTHER slot")
        extra = other
    elif objects == CLS_SLOT:
        extra = cls
    else:
        raise FusionConfigError(f"unknown fusion_objects {objects!r}; choose from {FUSION_OBJECTS}")
    return T.concat([aspect_rows, T.reshape(extra, (B, 1, H))], axis=1)


def slot_names(aspects: list[str], objects: str) -> list[str]:
    if objects == NONE:
        return ["CLS"]
    return list(aspects) + ["OTHER" if objects == OTHER else "CLS"]


def fuse_representation(aspect_rows: Tensor, cls: Tensor, other: Tensor | None, objects: str,
                        weighting: str, params: dict[str, Tensor], aspects: list[str]) -> FusedRepresentation:
    slots = build_slots(aspect_rows, cls, objects, other)
    names = slot_names(aspects, objects)
    if slots is None:
        return FusedRepresentation(cls, None, names)
    if weighting == CLS_GATING:
        w = cls_gating_weights(cls, params["fusion.gate.w"], params["fusion.gate.b"])
        return FusedRepresentation(fuse(w, slots), w, names)
    if weighting == PRESENCE:
        logits = presence_logits(slots, params["fusion.presence.w"], params["fusion.presence.b"])
        w = T.mul(T.sigmoid(logits), params["fusion.gamma"])
        return FusedRepresentation(fuse(w, slots), w, names, presence_logits=logits)
    raise FusionConfigError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")


def init_fusion_params(k: int, hidden: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    """Gate, presence heads and gamma sized for k aspects plus one extra slot."""
    S = k + 1
    p = {
        "fusion.gate.w": rng.normal(0.0, 0.02, size=(hidden, S)).astype(dtype),
        "fusion.gate.b": np.zeros(S, dtype),
        "fusion.presence.w": rng.normal(0.0, 0.02, size=(S, hidden)).astype(dtype),
        "fusion.presence.b": np.zeros(S, dtype),
        "fusion.gamma": np.ones(S, dtype),
    }
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in p.items()}
