import math

import numpy as np
import pytest

from aspectral import tensor as T
from aspectral.encoder import (EncoderConfig, attention_weights, encode_batch, encode_sequence, init_encoder_params,
                               multi_head_attention, split_heads)
from aspectral.tensor import ContractError, finite_diff_check
from aspectral.vocab import CLS, PAD, SEP


def params_for(cfg, seed=0):
    return init_encoder_params(cfg, np.random.default_rng(seed), np.float64)


CFG = EncoderConfig(hidden=8, layers=2, heads=2, ff_dim=16, max_len=10, vocab_size=20, dropout=0.0)


class TestEncoder:
    def test_shapes(self):
        p = params_for(CFG)
        out = encode_batch(np.array([[CLS, 7, SEP]]), np.ones((1, 3), int), p, CFG)
        assert out.hidden.shape == (1, 3, 8) and out.cls.shape == (1, 8)

    def test_encode_sequence_single_token(self):
        from aspectral.vocab import TokenSequence
        p = params_for(CFG)
        seq = TokenSequence(np.array([CLS, 9, SEP]), np.array([1, 1, 1]))
        assert encode_sequence(seq, p, CFG).hidden.shape == (1, 3, 8)

    def test_deterministic_without_dropout(self):
        p = params_for(CFG)
        ids = np.array([[CLS, 5, 6, SEP], [CLS, 5, 6, SEP]])
        out = encode_batch(ids, np.ones_like(ids), p, CFG).hidden.data
        np.testing.assert_array_equal(out[0], out[1])

    def test_pad_ids_do_not_leak(self):
        p = params_for(CFG)
        ids = np.array([[CLS, 5, 6, SEP, PAD, PAD]])
        mask = (ids != PAD).astype(int)
        base = encode_batch(ids, mask, p, CFG).hidden.data
        alt = ids.copy()
        alt[0, 4:] = [11, 13]  # perturb the padded ids, keep the mask
        other = encode_batch(alt, mask, p, CFG).hidden.data
        np.testing.assert_allclose(base[0, :4], other[0, :4], atol=1e-12)

    def test_overflow_is_a_contract_error(self):
        with pytest.raises(ContractError):
            encode_batch(np.ones((1, 11), int), np.ones((1, 11), int), params_for(CFG), CFG)

    def test_permutation_equivariance_without_positions(self):
        cfg = EncoderConfig(hidden=8, layers=1, heads=2, ff_dim=16, max_len=10, vocab_size=20)
        p = params_for(cfg, 3)
        p["emb.pos"].data[:] = 0.0
        ids = np.array([[CLS, 5, 6, 7, SEP]])
        perm = np.array([[CLS, 7, 5, 6, SEP]])
        a = encode_batch(ids, np.ones_like(ids), p, cfg).hidden.data[0]
        b = encode_batch(perm, np.ones_like(perm), p, cfg).hidden.data[0]
        np.testing.assert_allclose(b[[1, 2, 3]], a[[3, 1, 2]], atol=1e-12)

    def test_end_to_end_gradient(self):
        cfg = EncoderConfig(hidden=16, layers=2, heads=2, ff_dim=32, max_len=8, vocab_size=15)
        p = params_for(cfg, 1)
        noise = np.random.default_rng(2)
        for t in p.values():
            t.data = t.data + 0.2 * noise.standard_normal(t.shape)
        ids = np.array([[CLS, 5, 9, SEP, PAD], [CLS, 6, 7, 8, SEP]])
        w = T.tensor(noise.normal(size=(2, 5, 16)))
        f = lambda: T.sum(T.mul(encode_batch(ids, (ids != PAD).astype(int), p, cfg).hidden, w))
        assert finite_diff_check(f, list(p.values()), max_entries=5, prefer_nonzero=True, floor=1e-4) < 1e-4


class TestAttention:
    def test_zero_scores_average_values(self):
        v = T.tensor(np.arange(12.0).reshape(1, 3, 4))
        q = T.tensor(np.zeros((1, 2, 4)))
        k = T.tensor(np.random.default_rng(0).normal(size=(1, 3, 4)))
        out = multi_head_attention(q, k, v, np.ones((1, 3)), heads=2).data
        np.testing.assert_allclose(out[0, 0], v.data[0].mean(axis=0))

    def test_single_key_gets_all_weight(self):
        rng = np.random.default_rng(1)
        q = split_heads(T.tensor(rng.normal(size=(1, 3, 4))), 2)
        k = split_heads(T.tensor(rng.normal(size=(1, 1, 4))), 2)
        np.testing.assert_array_equal(attention_weights(q, k, np.ones((1, 1))).data, 1.0)

    def test_hand_two_token_case(self):
        q = T.tensor([[[1.0, 0.0]]])
        k = T.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        v = T.tensor([[[2.0, 0.0], [0.0, 4.0]]])
        s = 1 / math.sqrt(2)
        w0 = math.exp(s) / (math.exp(s) + 1)
        out = multi_head_attention(q, k, v, np.ones((1, 2)), heads=1).data[0, 0]
        np.testing.assert_allclose(out, [2 * w0, 4 * (1 - w0)], rtol=1e-12)

    def test_rows_sum_to_one_and_masked_keys_zero(self):
        rng = np.random.default_rng(2)
        q = split_heads(T.tensor(rng.normal(size=(2, 4, 8))), 2)
        k = split_heads(T.tensor(rng.normal(size=(2, 5, 8))), 2)
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
        w = attention_weights(q, k, mask).data
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert np.all(w[0, :, :, 3:] < 1e-12)
