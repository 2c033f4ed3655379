import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aspectral import tensor as T
from aspectral.diagnostics import tiny_batches, tiny_config
from aspectral.objectives import (LossWeights, ap_loss, app_loss, app_loss_logits, finetune_loss, mlm_loss,
                                  pretrain_loss, relevance_loss)
from aspectral.tensor import ContractError
from aspectral.training import Adam


def t(x):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestAspectPrediction:
    def test_uniform_logits_single_value(self):
        assert ap_loss(t(np.zeros(3)), t(np.ones((4, 3))), [[2]]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_uniform_logits_two_values(self):
        val = ap_loss(t(np.zeros(3)), t(np.ones((4, 3))), [[0, 3]]).item()
        assert val == pytest.approx(2 * math.log(4), abs=1e-12)

    @pytest.mark.parametrize("V", [2, 7, 31])
    def test_uniform_is_log_of_value_count(self, V):
        assert ap_loss(t(np.ones((2, 3))), t(np.zeros((V, 3))), [[0], [V - 1]]).item() == pytest.approx(
            math.log(V), abs=1e-6)

    def test_no_positives_is_zero_with_zero_gradient(self):
        emb, table = t(np.ones((2, 3))), t(np.ones((4, 3)))
        loss = ap_loss(emb, table, [[], []])
        T.backward(loss)
        assert loss.item() == 0.0 and np.all(emb.grad == 0.0) and np.all(table.grad == 0.0)

    def test_items_without_values_are_skipped(self):
        rng = np.random.default_rng(0)
        emb, table = rng.normal(size=(2, 3)), rng.normal(size=(5, 3))
        both = ap_loss(t(emb), t(table), [[1], []]).item()
        assert both == pytest.approx(ap_loss(t(emb[:1]), t(table), [[1]]).item(), abs=1e-12)

    def test_out_of_range_value(self):
        with pytest.raises(IndexError):
            ap_loss(t(np.zeros(3)), t(np.ones((4, 3))), [[4]])

    @settings(max_examples=30)
    @given(st.integers(0, 2**31 - 1))
    def test_invariant_to_permuting_the_value_table(self, seed):
        rng = np.random.default_rng(seed)
        emb, table = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
        pos = [[0, 2], [5], [1, 3, 4]]
        perm = rng.permutation(6)
        inv = np.argsort(perm)
        moved = [[int(inv[v]) for v in p] for p in pos]
        a = ap_loss(t(emb), t(table), pos).item()
        b = ap_loss(t(emb), t(table[perm]), moved).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_direct_evaluation(self):
        emb, table = np.array([1.0, 0.0]), np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        logits = table @ emb
        oracle = -(logits[0] - math.log(np.exp(logits).sum()))
        assert ap_loss(t(emb), t(table), [[0]]).item() == pytest.approx(oracle, abs=1e-12)


class TestPresencePrediction:
    @pytest.mark.parametrize("y", [0.0, 1.0])
    def test_half_probability(self, y):
        assert app_loss(t([0.5]), [y]).item() == pytest.approx(math.log(2), abs=1e-12)
        assert app_loss_logits(t([0.0]), [y]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_wrong(self):
        assert app_loss(t([0.9]), [0.0]).item() == pytest.approx(-math.log(0.1), abs=1e-12)
        assert app_loss(t([0.9]), [0.0]).item() == pytest.approx(2.3026, abs=1e-4)

    @settings(max_examples=50)
    @given(st.floats(-30, 30), st.sampled_from([0.0, 1.0]))
    def test_logit_form_matches_probability_form(self, z, y):
        p = 1 / (1 + math.exp(-z))
        if 1e-12 < p < 1 - 1e-12:
            assert app_loss_logits(t([z]), [y]).item() == pytest.approx(app_loss(t([p]), [y]).item(), rel=1e-6)

    def test_logit_form_is_finite_for_huge_logits(self):
        assert math.isfinite(app_loss_logits(t([800.0, -800.0]), [0.0, 1.0]).item())


class TestMaskedLanguageModel:
    def test_uniform_prediction(self):
        model, pb, _ = tiny_batches(tiny_config())
        for name in ("emb.tok", "mlm.bias"):
            model.params[name].data[:] = 0.0
        out = model.forward(pb.ids, pb.mask)
        loss = mlm_loss(model, out.enc.hidden, pb.batch_idx, pb.positions, pb.originals)
        assert loss.item() == pytest.approx(math.log(len(model.vocab)), abs=1e-9)

    def test_empty_mask_is_zero(self):
        model, pb, _ = tiny_batches(tiny_config())
        out = model.forward(pb.ids, pb.mask)
        empty = np.array([], dtype=int)
        assert mlm_loss(model, out.enc.hidden, empty, empty, empty).item() == 0.0

    def test_training_lowers_loss(self):
        model, pb, _ = tiny_batches(tiny_config())
        weights = LossWeights(lambda_p=0.0)
        opt = Adam(model.params)
        losses = []
        for _ in range(50):
            model.zero_grad()
            loss = pretrain_loss(model, pb, weights).total
            T.backward(loss)
            opt.step(1e-3)
            losses.append(loss.item())
        assert losses[-1] < losses[0] - 1.0 and losses[-1] < min(losses[:10])


class TestRelevance:
    def test_identical_embeddings(self):
        B = 4
        q = t(np.ones((B, 3)))
        assert relevance_loss(q, t(np.ones((B, 3))), t(np.ones((B, 3)))).item() == pytest.approx(
            math.log(2 * B), abs=1e-12)

    def test_needs_two_queries(self):
        with pytest.raises(ContractError):
            relevance_loss(t(np.ones((1, 3))), t(np.ones((1, 3))))

    def test_two_query_hand_example(self):
        q = t([[1.0, 0.0], [0.0, 1.0]])
        val = relevance_loss(q, t([[1.0, 0.0], [0.0, 1.0]])).item()
        assert val == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert val == pytest.approx(0.3133, abs=1e-4)

    def test_hard_negatives_add_to_denominator(self):
        q = t([[1.0, 0.0], [0.0, 1.0]])
        p = t([[1.0, 0.0], [0.0, 1.0]])
        n = t([[0.0, 0.0], [0.0, 0.0]])
        oracle = -math.log(math.e / (math.e + 1 + 2))
        assert relevance_loss(q, p, n).item() == pytest.approx(oracle, abs=1e-12)


class TestComposites:
    CFG = tiny_config(aspect_repr="extra_k", fusion_objects="cls", weighting="presence")

    def _losses(self, lambda_p, lambda_f):
        model, pb, rb = tiny_batches(self.CFG, jitter=0.1)
        w = LossWeights(lambda_p, lambda_f, use_app=True)
        return pretrain_loss(model, pb, w), finetune_loss(model, rb, w)

    def test_lambda_p_zero_is_plain_mlm(self):
        pre, _ = self._losses(0.0, 0.0)
        assert pre.total.item() == pre.parts["mlm"]

    def test_lambda_f_zero_is_plain_relevance(self):
        _, fine = self._losses(0.0, 0.0)
        assert fine.total.item() == fine.parts["rel"]

    @pytest.mark.parametrize("lam", [0.05, 0.1, 0.5, 2.0])
    def test_linear_in_lambda(self, lam):
        base_p, base_f = self._losses(1.0, 1.0)
        pre, fine = self._losses(lam, lam)
        assert pre.total.item() == pytest.approx(pre.parts["mlm"] + lam * base_p.parts["aspect"], abs=1e-9)
        assert fine.total.item() == pytest.approx(fine.parts["rel"] + lam * base_f.parts["aspect"], abs=1e-9)

    def test_aspect_sum_over_parts(self):
        pre, _ = self._losses(0.1, 0.0)
        terms = sum(v for k, v in pre.parts.items() if k.startswith(("ap.", "app.")))
        assert pre.parts["aspect"] == pytest.approx(terms, abs=1e-12)
        assert len([k for k in pre.parts if k.startswith("ap.")]) == 3

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 0.0)

    def test_unsupervised_items_contribute_nothing(self):
        model, pb, _ = tiny_batches(self.CFG)
        pb = replace(pb, targets=replace(pb.targets, supervised=np.zeros_like(pb.targets.supervised)))
        out = pretrain_loss(model, pb, LossWeights(0.1, 0.0, True))
        assert out.parts["aspect"] == 0.0
