import numpy as np
import pytest
from hypothesis import settings

from aspectral.data import ItemRecord, SynthConfig, synth_gen
from aspectral.encoder import EncoderConfig
from aspectral.model import ModelConfig, MultiAspectModel
from aspectral.vocab import build_aspect_schema, build_vocab

settings.register_profile("default", deadline=None)
settings.load_profile("default")

SMALL_SYNTH = SynthConfig(n_items=120, n_train=24, n_dev=8, n_test=8, n_brands=6, n_colors=5, n_categories=8,
                          specific_pool=200, noise_pool=40, judged_per_query=10)


@pytest.fixture(scope="session")
def small_data():
    return synth_gen(5, SMALL_SYNTH)


def make_model(items, aspect_repr="extra_k", fusion_objects="other", weighting="cls_gating", hidden=16,
               layers=2, heads=2, max_len=16, dtype="float64", seed=0, first_k_order=()):
    texts = [it.text for it in items]
    vocab = build_vocab(texts, 5000)
    schema = build_aspect_schema((it.aspects for it in items), ["brand", "color", "category"])
    enc = EncoderConfig(hidden=hidden, layers=layers, heads=heads, ff_dim=2 * hidden, max_len=max_len,
                        vocab_size=len(vocab), dropout=0.0)
    cfg = ModelConfig(encoder=enc, aspect_repr=aspect_repr, first_k_order=tuple(first_k_order),
                      fusion_objects=fusion_objects, weighting=weighting, dtype=dtype)
    return MultiAspectModel(cfg, vocab, schema, seed=seed)


def toy_items():
    return [
        ItemRecord("a", "acme red shoe", "a fine shoe", {"brand": ["Acme"], "color": ["red"], "category": ["shoe"]}),
        ItemRecord("b", "zeta blue hat", "warm hat", {"brand": ["Zeta"], "color": ["blue"], "category": ["hat"]}),
        ItemRecord("c", "plain sock", "cotton", {"brand": [], "color": ["blue"], "category": ["sock", "apparel"]}),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def fast_config(**overrides):
    """A 64-bit tiny run that trains in seconds on the small synthetic data."""
    from dataclasses import replace

    from aspectral.config import RunConfig, Schedule
    from aspectral.diagnostics import TINY_ENCODER

    cfg = RunConfig(dtype="float64", encoder=TINY_ENCODER, item_max_len=16, query_max_len=8,
                    pretrain=Schedule(lr=2e-3, epochs=2, batch_size=16),
                    finetune=Schedule(lr=1e-3, epochs=4, batch_size=8, eval_every=1, select_k=10))
    return cfg.with_overrides(overrides) if overrides else replace(cfg)


# PASS/FAIL lines from the acceptance tests, repeated at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
