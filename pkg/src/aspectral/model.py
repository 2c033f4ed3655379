"""The multi-aspect bi-encoder: encoder + aspect representation + fusion + heads."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .aspect_repr import (EXTRA_K, FIRST_K, RANDOM_K, REUSE_CLS, AspectEmbeddings, AspectReprVariant,
                          ReprStats, content_mask, represent_extra_k, represent_first_k,
                          represent_random_k, represent_reuse_cls)
from .encoder import EncoderConfig, EncoderOutput, encode_batch, init_encoder_params
from .fusion import (CLS_GATING, FUSION_OBJECTS, NONE, OTHER, WEIGHTINGS, FusedRepresentation,
                     FusionConfigError, fuse_representation, init_fusion_params, presence_logits)
from .tensor import Tensor
from .vocab import PAD, AspectSchema, ContentVocab


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aspect_repr: str = EXTRA_K
    first_k_order: tuple[str, ...] = ()
    random_k_positions: tuple[int, ...] = (3, 9, 15, 7)
    aspect_heads: int = 0  # 0 -> encoder head count
    fusion_objects: str = OTHER
    weighting: str = CLS_GATING
    dtype: str = "float32"

    @property
    def variant(self) -> AspectReprVariant:
        return AspectReprVariant(self.aspect_repr, tuple(self.first_k_order), tuple(self.random_k_positions))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self, aspects: list[str]) -> None:
        self.variant.validate(aspects, self.encoder.max_len)
        if self.fusion_objects not in FUSION_OBJECTS:
            raise FusionConfigError(f"unknown fusion_objects {self.fusion_objects!r}")
        if self.weighting not in WEIGHTINGS:
            raise FusionConfigError(f"unknown weighting {self.weighting!r}")
        if self.fusion_objects == OTHER and not self.variant.hosts_other(aspects):
            raise FusionConfigError(f"aspect_repr={self.aspect_repr} cannot host an OTHER slot")
        heads = self.aspect_heads or self.encoder.heads
        if self.encoder.hidden % heads:
            raise ValueError(f"hidden={self.encoder.hidden} not divisible by aspect_heads={heads}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def architecture(self) -> dict:
        """The part of the config that fixes the parameter set."""
        return {"encoder": asdict(self.encoder), "aspect_repr": self.aspect_repr,
                "aspect_heads": self.aspect_heads or self.encoder.heads}


@dataclass
class ModelOutput:
    enc: EncoderOutput
    aspects: AspectEmbeddings
    fused: FusedRepresentation

    @property
    def embedding(self) -> Tensor:
        return self.fused.embedding


class MultiAspectModel:
    """Parameters plus the forward pass shared by queries and items.

    Fusion/gating/presence parameters always cover k aspects plus one extra
    slot, so a checkpoint can be fine-tuned with any fusion setting.
    """

    def __init__(self, config: ModelConfig, vocab: ContentVocab, schema: AspectSchema,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        config.validate(schema.aspects)
        if config.encoder.vocab_size != len(vocab):
            raise ValueError(f"encoder vocab_size {config.encoder.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self.schema = schema
        self.stats = ReprStats()
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg, dt = self.config, self.config.np_dtype
        H, k = cfg.encoder.hidden, self.schema.k
        params = init_encoder_params(cfg.encoder, rng, dt)
        extra: dict[str, np.ndarray] = {
            "mlm.dense.w": rng.normal(0.0, 0.02, size=(H, H)).astype(dt),
            "mlm.dense.b": np.zeros(H, dt),
            "mlm.ln.g": np.ones(H, dt),
            "mlm.ln.b": np.zeros(H, dt),
            "mlm.bias": np.zeros(cfg.encoder.vocab_size, dt),
        }
        if cfg.aspect_repr == EXTRA_K:
            extra["aspect.queries"] = rng.normal(0.0, 0.02, size=(k + 1, H)).astype(dt)
            for name in ("wq", "wk", "wv"):
                extra[f"aspect.{name}"] = rng.normal(0.0, 0.02, size=(H, H)).astype(dt)
        for a in self.schema.aspects:
            extra[f"value.{a}"] = rng.normal(0.0, 0.02, size=(self.schema.size(a), H)).astype(dt)
        params.update({n: Tensor(v, requires_grad=True, name=n) for n, v in extra.items()})
        params.update(init_fusion_params(k, H, rng, dt))
        return params

    # ------------------------------------------------------------ utilities
    def with_config(self, **changes) -> "MultiAspectModel":
        """Same parameters (shared objects), different fusion/weighting settings."""
        from dataclasses import replace
        return MultiAspectModel(replace(self.config, **changes), self.vocab, self.schema, self.params)

    def architecture_digest(self) -> str:
        payload = json.dumps(self.config.architecture(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def min_width(self) -> int:
        return self.config.variant.min_width(self.schema.aspects)

    def batch_ids(self, texts: list[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
        seqs = [self.vocab.encode(t, max_len) for t in texts]
        width = max(max(len(s.ids) for s in seqs), min(self.min_width, self.config.encoder.max_len))
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s.ids)] = s.ids
        return ids, (ids != PAD).astype(np.int64)

    # -------------------------------------------------------------- forward
    def encode(self, ids: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> EncoderOutput:
        return encode_batch(ids, mask, self.params, self.config.encoder, rng)

    def represent(self, enc: EncoderOutput, ids: np.ndarray) -> AspectEmbeddings:
        cfg, k = self.config, self.schema.k
        if cfg.aspect_repr == REUSE_CLS:
            return represent_reuse_cls(enc, k)
        if cfg.aspect_repr == EXTRA_K:
            p = self.params
            return represent_extra_k(enc, p["aspect.queries"], p["aspect.wq"], p["aspect.wk"], p["aspect.wv"],
                                     content_mask(ids, enc.mask), cfg.aspect_heads or cfg.encoder.heads, k)
        positions, other = cfg.variant.positions(self.schema.aspects)
        if cfg.aspect_repr == FIRST_K:
            return represent_first_k(enc, positions, other, self.stats)
        if cfg.aspect_repr == RANDOM_K:
            return represent_random_k(enc, positions, other, self.stats)
        raise ValueError(cfg.aspect_repr)

    def forward(self, ids: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> ModelOutput:
        enc = self.encode(ids, mask, rng)
        asp = self.represent(enc, ids)
        fused = fuse_representation(asp.rows, enc.cls, asp.other, self.config.fusion_objects,
                                    self.config.weighting, self.params, self.schema.aspects)
        return ModelOutput(enc, asp, fused)

    def aspect_presence_logits(self, aspects: AspectEmbeddings) -> Tensor:
        """Presence logits for the explicit aspect rows only ``[B, k]``."""
        k = self.schema.k
        return presence_logits(aspects.rows, self.params["fusion.presence.w"][:k],
                               self.params["fusion.presence.b"][:k])

    def mlm_logits(self, hidden_rows: Tensor) -> Tensor:
        """Vocabulary logits through a transform and the tied token embeddings."""
        p = self.params
        h = T.gelu(T.linear(hidden_rows, p["mlm.dense.w"], p["mlm.dense.b"]))
        h = T.layer_norm(h, p["mlm.ln.g"], p["mlm.ln.b"])
        return T.add(T.matmul(h, T.transpose(p["emb.tok"], (1, 0))), p["mlm.bias"])

    def embed_texts(self, texts: list[str], max_len: int, batch_size: int = 128) -> np.ndarray:
        """Final (fused) embeddings for a list of texts, without recording a tape."""
        out = []
        with T.no_grad():
            for start in range(0, len(texts), batch_size):
                ids, mask = self.batch_ids(texts[start:start + batch_size], max_len)
                out.append(self.forward(ids, mask).embedding.data)
        H = self.config.encoder.hidden
        return np.concatenate(out, axis=0) if out else np.zeros((0, H), self.config.np_dtype)

    def explain(self, text: str, max_len: int) -> list[tuple[str, float]]:
        """(slot name, fusion weight) pairs for one text."""
        with T.no_grad():
            ids, mask = self.batch_ids([text], max_len)
            fused = self.forward(ids, mask).fused
        if fused.weights is None:
            return [("CLS", 1.0)]
        return list(zip(fused.slot_names, (float(w) for w in fused.weights.data[0])))
