import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special
from scipy import stats as sps

from aspectral.stats import betainc, paired_t_test, t_two_tailed_p


class TestIncompleteBeta:
    @settings(max_examples=200)
    @given(st.floats(0.05, 60), st.floats(0.05, 60), st.floats(0, 1))
    def test_matches_reference(self, a, b, x):
        assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-10)

    def test_domain(self):
        with pytest.raises(ValueError):
            betainc(1, 1, 1.5)


class TestTDistribution:
    @pytest.mark.parametrize("df", [1, 2, 4, 9, 30, 200])
    @pytest.mark.parametrize("t", [0.0, 0.5, 1.96, 4.2426, 12.0])
    def test_two_tailed_p(self, t, df):
        assert t_two_tailed_p(t, df) == pytest.approx(2 * sps.t.sf(abs(t), df), abs=1e-12, rel=1e-9)


class TestPairedTTest:
    def test_reference_example(self):
        res = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
        assert res.t == pytest.approx(4.243, abs=1e-3)
        assert res.p == pytest.approx(0.0132, abs=5e-4)
        assert res.df == 4

    @settings(max_examples=100)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 60))
    def test_matches_scipy(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=n), rng.normal(size=n)
        ref = sps.ttest_rel(a, b)
        res = paired_t_test(a, b)
        assert res.t == pytest.approx(ref.statistic, rel=1e-9)
        assert res.p == pytest.approx(ref.pvalue, abs=1e-10)

    def test_swap_negates_t_keeps_p(self):
        a, b = [0.3, 0.5, 0.1, 0.9], [0.2, 0.1, 0.4, 0.3]
        x, y = paired_t_test(a, b), paired_t_test(b, a)
        assert x.t == -y.t and x.p == y.p

    def test_shift_invariance(self):
        a, b = np.array([0.3, 0.5, 0.1, 0.9]), np.array([0.2, 0.1, 0.4, 0.3])
        assert paired_t_test(a + 7, b + 7).p == pytest.approx(paired_t_test(a, b).p, abs=1e-12)

    def test_identical_samples(self):
        res = paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
        assert res.p == 1.0 and res.degenerate

    def test_constant_nonzero_difference(self):
        res = paired_t_test([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
        assert res.p == 0.0 and res.t == float("inf") and res.degenerate

    def test_bad_input(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [2.0])
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [1.0])
