import numpy as np
import pytest

from aspectral import tensor as T
from aspectral.aspect_repr import (AspectReprVariant, ReprConfigError, ReprStats, represent_extra_k,
                                   represent_first_k, represent_random_k, represent_reuse_cls)
from aspectral.encoder import EncoderOutput
from aspectral.objectives import ap_loss

from conftest import make_model


def fake_enc(B=2, n=8, H=4, lengths=None, seed=0):
    hidden = T.Tensor(np.random.default_rng(seed).normal(size=(B, n, H)), requires_grad=True)
    mask = np.ones((B, n), int)
    if lengths is not None:
        for b, L in enumerate(lengths):
            mask[b, L:] = 0
    return EncoderOutput(hidden, hidden[:, 0], mask)


class TestReuseCls:
    def test_rows_equal_cls(self):
        enc = fake_enc()
        rows = represent_reuse_cls(enc, 3).rows.data
        for j in range(3):
            np.testing.assert_array_equal(rows[:, j], enc.cls.data)
        assert np.max(np.abs(rows - rows[:, :1])) == 0.0

    def test_k_one(self):
        enc = fake_enc()
        np.testing.assert_array_equal(represent_reuse_cls(enc, 1).rows.data[:, 0], enc.cls.data)

    def test_ap_on_second_aspect_reaches_encoder(self, small_data):
        items = small_data[0]
        model = make_model(items, aspect_repr="reuse_cls", fusion_objects="none")
        ids, mask = model.batch_ids([it.text for it in items[:4]], 16)
        out = model.forward(ids, mask)
        a = model.schema.aspects[1]
        loss = ap_loss(out.aspects.rows[:, 1], model.params[f"value.{a}"], [[0], [1], [0], [1]])
        T.backward(loss)
        assert np.abs(model.params["layer0.attn.q.w"].grad).sum() > 0


class TestExtraK:
    def _weights(self, H=4, k=3, seed=1):
        rng = np.random.default_rng(seed)
        mk = lambda *s: T.Tensor(rng.normal(size=s))
        return mk(k + 1, H), mk(H, H), mk(H, H), mk(H, H)

    def test_single_key_rows_are_its_value(self):
        enc = fake_enc(B=1, n=3)
        q, wq, wk, wv = self._weights()
        keys = np.array([[0, 1, 0]], bool)
        out = represent_extra_k(enc, q, wq, wk, wv, keys, heads=2, k=3)
        expected = enc.hidden.data[0, 1] @ wv.data
        for j in range(3):
            np.testing.assert_allclose(out.rows.data[0, j], expected, atol=1e-12)
        np.testing.assert_allclose(out.other.data[0], expected, atol=1e-12)

    def test_zero_query_projection_averages(self):
        enc = fake_enc(B=1, n=5)
        q, _, wk, wv = self._weights()
        keys = np.array([[0, 1, 1, 1, 0]], bool)
        out = represent_extra_k(enc, q, T.Tensor(np.zeros((4, 4))), wk, wv, keys, heads=2, k=3)
        expected = (enc.hidden.data[0, 1:4] @ wv.data).mean(axis=0)
        np.testing.assert_allclose(out.rows.data[0, 0], expected, atol=1e-12)

    def test_hand_two_token_one_head(self):
        H = 2
        hidden = T.Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        enc = EncoderOutput(hidden, hidden[:, 0], np.ones((1, 2), int))
        eye = T.Tensor(np.eye(H))
        q = T.Tensor(np.array([[2.0, 0.0], [0.0, 0.0]]))
        out = represent_extra_k(enc, q, eye, eye, eye, np.ones((1, 2), bool), heads=1, k=1)
        s = 2.0 / np.sqrt(2)
        w = np.exp([s, 0.0]) / np.exp([s, 0.0]).sum()
        np.testing.assert_allclose(out.rows.data[0, 0], w, rtol=1e-12)
        np.testing.assert_allclose(out.other.data[0], [0.5, 0.5], rtol=1e-12)

    def test_attention_rows_sum_to_one(self):
        enc = fake_enc(B=2, n=6)
        q, wq, wk, wv = self._weights()
        keys = np.array([[0, 1, 1, 0, 0, 0], [0, 1, 1, 1, 1, 0]], bool)
        att = represent_extra_k(enc, q, wq, wk, wv, keys, heads=2, k=3).attention
        np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-6)


class TestFirstAndRandomK:
    def test_schema_order_positions(self):
        enc = fake_enc()
        pos, other = AspectReprVariant("first_k", ("brand", "color", "category")).positions(
            ["brand", "color", "category"])
        out = represent_first_k(enc, pos, other)
        for j in range(3):
            np.testing.assert_array_equal(out.rows.data[:, j], enc.hidden.data[:, j + 1])
        np.testing.assert_array_equal(out.other.data, enc.hidden.data[:, 4])

    def test_category_first_order(self):
        pos, _ = AspectReprVariant("first_k", ("category", "color", "brand")).positions(
            ["brand", "color", "category"])
        assert pos == [3, 2, 1]

    def test_permuting_order_permutes_rows(self):
        enc = fake_enc()
        aspects = ["brand", "color", "category"]
        a = represent_first_k(enc, *AspectReprVariant("first_k", tuple(aspects)).positions(aspects)).rows.data
        b = represent_first_k(enc, *AspectReprVariant("first_k", ("category", "color", "brand")).positions(
            aspects)).rows.data
        np.testing.assert_array_equal(np.sort(a.reshape(-1)), np.sort(b.reshape(-1)))
        np.testing.assert_array_equal(a[:, 0], b[:, 2])

    def test_random_positions(self):
        enc = fake_enc(n=16)
        out = represent_random_k(enc, [3, 9, 15], 7)
        np.testing.assert_array_equal(out.rows.data, enc.hidden.data[:, [3, 9, 15]])
        np.testing.assert_array_equal(out.other.data, enc.hidden.data[:, 7])

    def test_random_one_two_three_equals_first_k(self):
        enc = fake_enc()
        np.testing.assert_array_equal(represent_random_k(enc, [1, 2, 3]).rows.data,
                                      represent_first_k(enc, [1, 2, 3]).rows.data)

    def test_duplicate_positions(self):
        with pytest.raises(ReprConfigError):
            represent_random_k(fake_enc(), [1, 2, 2])
        with pytest.raises(ReprConfigError):
            AspectReprVariant("random_k", random_k_positions=(3, 3, 5)).validate(["a", "b", "c"], 16)

    def test_short_sequence_reads_pad_state_and_counts(self):
        enc = fake_enc(B=2, n=8, lengths=[3, 8])
        stats = ReprStats()
        out = represent_first_k(enc, [1, 2, 3], 4, stats)
        np.testing.assert_array_equal(out.rows.data[0, 2], enc.hidden.data[0, 3])
        assert stats.short_sequence[2] == 1 and stats.short_sequence[3] == 1 and stats.short_sequence[4] == 1

    def test_no_new_parameters(self, small_data):
        items = small_data[0]
        first = make_model(items, aspect_repr="first_k")
        reuse = make_model(items, aspect_repr="reuse_cls", fusion_objects="none")
        extra = make_model(items, aspect_repr="extra_k")
        assert set(first.params) == set(reuse.params)
        assert set(extra.params) - set(first.params) == {"aspect.queries", "aspect.wq", "aspect.wk", "aspect.wv"}

    @pytest.mark.parametrize("kind", ["reuse_cls", "extra_k", "first_k", "random_k"])
    def test_finite_rows(self, small_data, kind):
        items = small_data[0]
        model = make_model(items, aspect_repr=kind, fusion_objects="none")
        ids, mask = model.batch_ids([it.text for it in items[:5]] + [""], 16)
        rows = model.represent(model.encode(ids, mask), ids).rows.data
        assert rows.shape == (6, 3, 16) and np.all(np.isfinite(rows))
