"""Run configuration and its plain-text ``key = value`` file format.

One setting per line, dotted keys for nested sections, ``#`` starts a
comment. Values are JSON literals (numbers, ``true``/``false``, quoted
strings, ``[lists]``); anything that does not parse as JSON is taken as a
bare string. Example::

    seed = 3
    aspect_repr = first_k
    first_k_order = ["category", "color", "brand"]
    encoder.hidden = 32
    finetune.lr = 2e-4
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .encoder import EncoderConfig
from .model import ModelConfig
from .objectives import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    warmup: float = 0.1
    eval_every: int = 2
    select_k: int = 100


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    aspects: tuple[str, ...] = ("brand", "color", "category")
    vocab_cap: int = 8000
    item_max_len: int = 24
    query_max_len: int = 12
    concat_aspects: bool = False
    annotation_fraction: float = 1.0

    aspect_repr: str = "extra_k"
    first_k_order: tuple[str, ...] = ()
    random_k_positions: tuple[int, ...] = (3, 9, 15, 7)
    aspect_heads: int = 0
    fusion_objects: str = "other"
    weighting: str = "presence"

    lambda_p: float = 0.1
    lambda_f: float = 0.0
    use_app: bool = False
    mlm_ratio: float = 0.15

    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(dropout=0.1))
    pretrain: Schedule = field(default_factory=lambda: Schedule(lr=2e-3, epochs=48, batch_size=32))
    finetune: Schedule = field(default_factory=lambda: Schedule(lr=1e-3, epochs=20, batch_size=16))

    def model_config(self, vocab_size: int) -> ModelConfig:
        enc = replace(self.encoder, vocab_size=vocab_size,
                      max_len=max(self.encoder.max_len, self.item_max_len, self.query_max_len))
        return ModelConfig(encoder=enc, aspect_repr=self.aspect_repr, first_k_order=tuple(self.first_k_order),
                           random_k_positions=tuple(self.random_k_positions), aspect_heads=self.aspect_heads,
                           fusion_objects=self.fusion_objects, weighting=self.weighting, dtype=self.dtype)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.lambda_f, self.use_app)

    def validate(self) -> None:
        if not 0 < self.mlm_ratio < 1:
            raise ConfigError(f"mlm_ratio must be in (0, 1), got {self.mlm_ratio}")
        if not 0 < self.annotation_fraction <= 1:
            raise ConfigError(f"annotation_fraction must be in (0, 1], got {self.annotation_fraction}")
        if self.finetune.batch_size < 2:
            raise ConfigError("finetune.batch_size must be >= 2 (in-batch negatives)")
        if self.item_max_len < 2 or self.query_max_len < 2:
            raise ConfigError("max lengths must be >= 2")
        try:
            self.loss_weights()
            self.model_config(self.encoder.vocab_size).validate(list(self.aspects))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # --------------------------------------------------------- flat views
    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in fields(v):
                    flat[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                flat[f.name] = list(v) if isinstance(v, tuple) else v
        return flat

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_flat().items())

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return from_flat({**self.to_flat(), **overrides})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _coerce(value: Any, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            items = tuple(value)
            if current and isinstance(current[0], int):
                items = tuple(int(v) for v in items)
            return items
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r}") from None


def from_flat(flat: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {}
    known = {f.name: f for f in fields(base)}
    for key, value in flat.items():
        head, _, tail = key.partition(".")
        if head not in known:
            raise ConfigError(f"unknown config key {key!r}")
        sub = getattr(base, head)
        if tail:
            if not dataclasses.is_dataclass(sub) or tail not in {g.name for g in fields(sub)}:
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(head, {})[tail] = _coerce(value, getattr(sub, tail), key)
        else:
            if dataclasses.is_dataclass(sub):
                raise ConfigError(f"config key {key!r} names a section; use {key}.<field>")
            top[head] = _coerce(value, sub, key)
    for head, kv in nested.items():
        try:
            top[head] = replace(getattr(base, head), **kv)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return replace(base, **top)


def parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        line = line.split(" #", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        flat[key.strip()] = parse_value(raw)
    return flat


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        flat = parse_text(p.read_text(encoding="utf-8"), str(p))
    flat.update(overrides or {})
    return from_flat(flat)
