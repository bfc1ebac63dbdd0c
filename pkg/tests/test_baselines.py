import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from timestep_lab.baselines import (
    SamplerError,
    WeightTable,
    sample_categorical,
    sample_lognormal_sigmoid,
    uniform_sample,
    weights_min_snr,
    weights_p2,
    weights_to_probs,
)


class TestUniform:
    def test_range(self, rng):
        t = uniform_sample(1000, rng, size=50_000)
        assert t.min() == 1 and t.max() == 1000

    def test_chi_square(self, rng):
        T = 20
        counts = np.bincount(uniform_sample(T, rng, size=100_000), minlength=T + 1)[1:]
        assert stats.chisquare(counts).pvalue > 1e-3


class TestMinSnr:
    def test_first_weight(self, linear1000):
        # snr_1 = (1 - 1e-4) / 1e-4 = 9999, so w_1 = 5 / 9999
        assert weights_min_snr(linear1000).at(1) == pytest.approx(5 / 9999, rel=1e-10)

    def test_saturates_at_one(self, linear1000):
        w = weights_min_snr(linear1000, gamma=5).w
        assert np.all(w <= 1.0)
        np.testing.assert_array_equal(w[linear1000.snr <= 5], 1.0)

    def test_rejects_nonpositive_gamma(self, linear1000):
        with pytest.raises(SamplerError):
            weights_min_snr(linear1000, gamma=0)


class TestP2:
    def test_gamma_zero_is_flat(self, linear1000):
        np.testing.assert_array_equal(weights_p2(linear1000, k=1, gamma=0).w, 1.0)

    def test_gamma_one(self, linear1000):
        w = weights_p2(linear1000, k=1, gamma=1)
        assert w.at(1) == pytest.approx(1 / 10000, rel=1e-10)
        assert w.at(500) == pytest.approx(1 / (1 + 0.08528994446263685), rel=1e-10)

    def test_increasing_in_t(self, linear1000):
        assert np.all(np.diff(weights_p2(linear1000, k=1, gamma=0.5).w) > 0)


class TestNormalisation:
    def test_sums_to_one(self, linear1000):
        for table in (weights_min_snr(linear1000), weights_p2(linear1000, 1, 1)):
            p = weights_to_probs(table)
            assert p.mode == "sampling_prob"
            assert p.w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_rejects_bad_tables(self):
        with pytest.raises(SamplerError):
            WeightTable(np.zeros(4))
        with pytest.raises(SamplerError):
            WeightTable(np.array([1.0, -1.0]))
        with pytest.raises(SamplerError):
            WeightTable(np.ones(3), mode="other")


class TestCategorical:
    def test_frequencies(self, rng):
        p = weights_to_probs(WeightTable(np.array([1.0, 2.0, 3.0, 4.0])))
        counts = np.bincount(sample_categorical(p, rng, 100_000), minlength=5)[1:]
        assert stats.chisquare(counts, f_exp=p.w * 100_000).pvalue > 1e-3

    def test_zero_probability_never_drawn(self, rng):
        p = weights_to_probs(WeightTable(np.array([0.0, 1.0, 0.0, 1.0, 0.0])))
        t = sample_categorical(p, rng, 20_000)
        assert set(np.unique(t)) == {2, 4}

    def test_requires_probabilities(self, rng):
        with pytest.raises(SamplerError):
            sample_categorical(WeightTable(np.ones(3)), rng, 5)


class TestLogNormal:
    def test_zero_logit_is_midpoint(self):
        assert sample_lognormal_sigmoid(1000, z=np.array(0.0)) == 501

    def test_median(self, rng):
        t = sample_lognormal_sigmoid(1000, 0.0, 1.0, rng, size=40_000)
        frac = np.mean(t <= 501)
        # P(t <= 501) = P(u < 0.501) which is 0.5 plus a sliver
        assert abs(frac - 0.501) < 4 * np.sqrt(0.25 / 40_000)

    def test_symmetry(self):
        z = np.linspace(-4, 4, 101)[:-1]
        a = sample_lognormal_sigmoid(1000, z=z)
        b = sample_lognormal_sigmoid(1000, z=-z)
        # discretize maps u and 1 - u to t and T + 1 - t except on grid points
        assert np.all(np.abs(a + b - 1001) <= 1)

    def test_rejects_bad_sigma(self, rng):
        with pytest.raises(SamplerError):
            sample_lognormal_sigmoid(100, 0.0, 0.0, rng)


@settings(max_examples=30, deadline=None)
@given(
    weights=st.lists(st.floats(0.0, 10.0), min_size=2, max_size=30).filter(lambda w: sum(w) > 1e-6),
    seed=st.integers(0, 2**32 - 1),
)
def test_categorical_draws_stay_in_support(weights, seed):
    p = weights_to_probs(WeightTable(np.array(weights)))
    t = sample_categorical(p, np.random.default_rng(seed), 200)
    assert t.min() >= 1 and t.max() <= len(weights)
    assert np.all(p.w[t - 1] > 0)
