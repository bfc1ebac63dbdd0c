import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from timestep_lab import nn
from timestep_lab.policy import (
    PolicyError,
    beta_entropy,
    beta_entropy_grad,
    beta_log_density,
    beta_score,
    discretize,
    draw_timestep,
    init_policy,
    policy_forward,
    policy_gradient,
    policy_objective,
    reinforce_update,
    sample_beta,
    softplus,
    softplus_inv,
)


class TestPolicyHead:
    def test_zero_output_layer_gives_log2(self, rng):
        phi = init_policy(2, rng, hidden_dims=(8,))
        W, b = phi.layers[-1]
        b[:] = 0.0
        a, bb = policy_forward(phi, np.array([0.3, -2.0]))
        assert a == pytest.approx(math.log(2) + 1e-4, rel=1e-12)
        assert bb == pytest.approx(math.log(2) + 1e-4, rel=1e-12)

    def test_default_init_is_uniform_beta(self, rng):
        phi = init_policy(2, rng, hidden_dims=(8, 8))
        a, b = policy_forward(phi, rng.standard_normal((5, 2)))
        np.testing.assert_allclose(a, 1.0, rtol=1e-12)
        np.testing.assert_allclose(b, 1.0, rtol=1e-12)

    def test_softplus_inverse(self):
        y = np.array([1e-3, 0.5, 1.0, 30.0])
        np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)

    def test_rejects_nonfinite_input(self, rng):
        with pytest.raises(PolicyError):
            policy_forward(init_policy(2, rng), np.array([np.nan, 0.0]))


class TestDiscretize:
    def test_examples(self):
        assert discretize(0.5, 1000) == 501
        assert discretize(1e-9, 1000) == 1
        assert discretize(1 - 1e-12, 1000) == 1000
        np.testing.assert_array_equal(discretize(np.array([0.0999, 0.1]), 10), [1, 2])

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.2])
    def test_rejects_boundary(self, u):
        with pytest.raises(PolicyError):
            discretize(u, 10)

    @settings(max_examples=60, deadline=None)
    @given(u=st.floats(1e-12, 1 - 1e-12), T=st.integers(1, 5000))
    def test_range(self, u, T):
        t = discretize(u, T)
        assert 1 <= t <= T


AB_CASES = [(1.0, 1.0), (2.0, 2.0), (0.5, 3.0), (7.0, 1.5), (0.3, 0.4)]


class TestBetaNumerics:
    @pytest.mark.parametrize("a,b", AB_CASES)
    def test_density_integrates_to_one(self, a, b):
        val, _ = integrate.quad(lambda u: math.exp(beta_log_density(u, a, b)), 0, 1, limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("a,b", AB_CASES)
    def test_density_matches_scipy(self, a, b):
        u = np.linspace(0.01, 0.99, 17)
        np.testing.assert_allclose(beta_log_density(u, a, b), stats.beta(a, b).logpdf(u), rtol=1e-10)

    @pytest.mark.parametrize(
        "a,b,expected",
        # reference values from scipy.stats.beta(a, b).entropy()
        [(1, 1, 0.0), (2, 2, -0.12509280256138827), (4, 4, -0.3844995654664469), (8, 8, -0.6937427565041755)],
    )
    def test_entropy_values(self, a, b, expected):
        assert beta_entropy(a, b) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("a,b", AB_CASES[1:4])
    def test_entropy_by_quadrature(self, a, b):
        def integrand(u):
            lp = beta_log_density(u, a, b)
            return -math.exp(lp) * lp

        val, _ = integrate.quad(integrand, 0, 1, limit=200)
        assert beta_entropy(a, b) == pytest.approx(val, abs=1e-7)

    def test_entropy_decreases_with_concentration(self):
        h = [beta_entropy(c, c) for c in (1, 2, 4, 8)]
        assert all(x > y for x, y in zip(h, h[1:]))

    @pytest.mark.parametrize("a,b", AB_CASES[1:4])
    def test_score_has_zero_mean(self, a, b):
        for which in (0, 1):
            val, _ = integrate.quad(
                lambda u: math.exp(beta_log_density(u, a, b)) * beta_score(u, a, b)[which], 0, 1, limit=200
            )
            assert val == pytest.approx(0.0, abs=1e-6)

    def test_score_matches_finite_difference(self):
        u, a, b, h = 0.3, 2.5, 1.7, 1e-6
        sa, sb = beta_score(u, a, b)
        assert sa == pytest.approx((beta_log_density(u, a + h, b) - beta_log_density(u, a - h, b)) / (2 * h), rel=1e-6)
        assert sb == pytest.approx((beta_log_density(u, a, b + h) - beta_log_density(u, a, b - h)) / (2 * h), rel=1e-6)

    def test_entropy_grad_matches_finite_difference(self):
        a, b, h = 2.5, 0.7, 1e-6
        da, db = beta_entropy_grad(a, b)
        assert da == pytest.approx((beta_entropy(a + h, b) - beta_entropy(a - h, b)) / (2 * h), rel=1e-6)
        assert db == pytest.approx((beta_entropy(a, b + h) - beta_entropy(a, b - h)) / (2 * h), rel=1e-6)

    def test_rejects_bad_parameters(self):
        with pytest.raises(PolicyError):
            beta_entropy(0.0, 1.0)
        with pytest.raises(PolicyError):
            beta_log_density(1.0, 2.0, 2.0)


class TestSampling:
    @pytest.mark.parametrize("a,b", [(2.0, 5.0), (0.5, 0.5)])
    def test_matches_beta_distribution(self, a, b, rng):
        u, _ = sample_beta(np.full(20_000, a), np.full(20_000, b), rng)
        assert stats.kstest(u, stats.beta(a, b).cdf).pvalue > 1e-3

    def test_tiny_parameters_are_clamped(self, rng):
        u, clamped = sample_beta(np.full(1000, 1e-4), np.full(1000, 1e-4), rng)
        assert clamped > 0
        assert np.all((u > 0) & (u < 1))

    def test_draw_timestep_shapes(self, rng):
        phi = init_policy(2, rng, hidden_dims=(8,))
        d = draw_timestep(phi, rng.standard_normal((7, 2)), rng, 1000)
        assert d.t.shape == (7,) and d.u.shape == (7,)
        assert np.all((d.t >= 1) & (d.t <= 1000))
        np.testing.assert_allclose(d.log_density, beta_log_density(d.u, d.a, d.b))


class TestReinforce:
    def _setup(self, rng, n=6):
        phi = init_policy(3, rng, hidden_dims=(8, 8))
        # move off the symmetric start so a and b differ across rows
        phi = phi.with_flat(phi.flat() + 0.3 * rng.standard_normal(phi.flat().size))
        x0 = rng.standard_normal((n, 3))
        u = rng.uniform(0.05, 0.95, size=n)
        return phi, x0, u

    def test_gradient_matches_finite_difference(self, rng):
        phi, x0, u = self._setup(rng)
        g = nn.flatten(policy_gradient(phi, x0, u, delta_tilde=-0.7, ent_coef=0.05))
        base = phi.flat()
        h = 1e-6
        for i in rng.choice(base.size, size=60, replace=False):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            num = (
                policy_objective(phi.with_flat(up), x0, u, -0.7, 0.05) - policy_objective(phi.with_flat(dn), x0, u, -0.7, 0.05)
            ) / (2 * h)
            assert abs(num - g[i]) <= 1e-4 * max(abs(num), abs(g[i]), 1e-6)

    def test_small_step_increases_objective(self, rng):
        phi, x0, u = self._setup(rng)
        draw = type("D", (), {"u": u})()
        before = policy_objective(phi, x0, u, 1.3, 0.01)
        new, applied = reinforce_update(phi, x0, draw, 1.3, ent_coef=0.01, lr=1e-4)
        assert applied
        assert policy_objective(new, x0, u, 1.3, 0.01) > before

    def test_zero_reward_and_entropy_is_a_no_op(self, rng):
        phi, x0, u = self._setup(rng)
        draw = type("D", (), {"u": u})()
        new, _ = reinforce_update(phi, x0, draw, 0.0, ent_coef=0.0, lr=1.0)
        np.testing.assert_array_equal(new.flat(), phi.flat())

    def test_positive_reward_raises_likelihood_of_draw(self, rng):
        phi, x0, u = self._setup(rng, n=1)
        draw = type("D", (), {"u": u})()
        a0, b0 = policy_forward(phi, x0)
        new, _ = reinforce_update(phi, x0, draw, 1.0, ent_coef=0.0, lr=1e-3)
        a1, b1 = policy_forward(new, x0)
        assert beta_log_density(u, a1, b1)[0] > beta_log_density(u, a0, b0)[0]

    def test_nonfinite_gradient_is_skipped(self, rng):
        phi, x0, u = self._setup(rng)
        draw = type("D", (), {"u": u})()
        with np.errstate(invalid="ignore"):
            new, applied = reinforce_update(phi, x0, draw, np.inf, ent_coef=0.0)
        assert not applied
        np.testing.assert_array_equal(new.flat(), phi.flat())
