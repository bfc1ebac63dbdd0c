"""Beta-distribution timestep policy pi_phi(. | x0) and its likelihood-ratio update.

A small MLP maps a clean sample to two raw outputs; ``softplus + a_floor``
turns them into Beta parameters (a, b). A draw u ~ Beta(a, b) is mapped to a
training timestep by :func:`discretize`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma

from . import nn

logger = logging.getLogger(__name__)

U_CLAMP = 1e-9


class PolicyError(ValueError):
    pass


@dataclass
class PolicyParams:
    layers: list
    dim: int
    hidden_dims: tuple = (64, 64)
    a_floor: float = 1e-4
    activation: str = "silu"

    def copy(self):
        return PolicyParams(nn.copy_layers(self.layers), self.dim, tuple(self.hidden_dims), self.a_floor, self.activation)

    def flat(self):
        return nn.flatten(self.layers)

    def with_flat(self, vec):
        out = self.copy()
        out.layers = nn.unflatten(np.asarray(vec, dtype=np.float64).copy(), self.layers)
        return out


@dataclass
class TimestepDraw:
    """One draw per sample; fields are arrays over the batch."""

    a: np.ndarray
    b: np.ndarray
    u: np.ndarray
    t: np.ndarray
    log_density: np.ndarray
    clamped: int = 0


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def init_policy(dim, rng, hidden_dims=(64, 64), a_floor=1e-4, init_ab=1.0):
    """Random hidden layers; the output layer starts at zero weight with bias chosen so a = b = ``init_ab``."""
    layers = nn.init_layers([dim, *hidden_dims, 2], rng, zero_last=True)
    W, b = layers[-1]
    layers[-1] = (W, np.full(2, softplus_inv(init_ab - a_floor)))
    return PolicyParams(layers, dim, tuple(hidden_dims), a_floor)


def _raw(phi, x0):
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise PolicyError("policy input is not finite")
    z, cache = nn.mlp_forward(phi.layers, x, phi.activation)
    if not np.all(np.isfinite(z)):
        raise PolicyError("policy network produced non-finite output")
    return z, cache


def policy_forward(phi, x0):
    """(a, b) = softplus(MLP(x0)) + a_floor; scalars for a single vector, arrays for a batch."""
    z, _ = _raw(phi, x0)
    ab = softplus(z) + phi.a_floor
    if np.ndim(x0) == 1:
        return float(ab[0, 0]), float(ab[0, 1])
    return ab[:, 0], ab[:, 1]


def discretize(u, T):
    """t = min(T, floor(u T) + 1) for u in (0, 1)."""
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise PolicyError("u must lie strictly inside (0, 1)")
    t = np.minimum(T, np.floor(u_arr * T).astype(np.int64) + 1)
    return int(t) if t.ndim == 0 else t


def _check_ab(a, b):
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise PolicyError("Beta parameters must be positive")


def log_beta_fn(a, b):
    return gammaln(a) + gammaln(b) - gammaln(a + b)


def beta_log_density(u, a, b):
    """log of the Beta(a, b) density at u."""
    _check_ab(a, b)
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise PolicyError("u must lie strictly inside (0, 1)")
    return (a - 1.0) * np.log(u) + (b - 1.0) * np.log1p(-u) - log_beta_fn(a, b)


def beta_entropy(a, b):
    _check_ab(a, b)
    return log_beta_fn(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)


def beta_score(u, a, b):
    """Partial derivatives of the log density with respect to a and b."""
    common = digamma(a + b)
    return np.log(u) - digamma(a) + common, np.log1p(-u) - digamma(b) + common


def beta_entropy_grad(a, b):
    tri_ab = polygamma(1, a + b)
    da = -(a - 1.0) * polygamma(1, a) + (a + b - 2.0) * tri_ab
    db = -(b - 1.0) * polygamma(1, b) + (a + b - 2.0) * tri_ab
    return da, db


def sample_beta(a, b, rng):
    """u = g_a / (g_a + g_b) with g ~ Gamma; returns ``(u, n_clamped)``."""
    ga = rng.standard_gamma(a)
    gb = rng.standard_gamma(b)
    total = ga + gb
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(total > 0, ga / np.where(total > 0, total, 1.0), a / (a + b))
    clamped = int(np.sum((u < U_CLAMP) | (u > 1.0 - U_CLAMP)))
    u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
    if clamped:
        logger.debug("clamped %d Beta draws into (%g, 1 - %g)", clamped, U_CLAMP, U_CLAMP)
    return u, clamped


def draw_timestep(phi, x0, rng, T):
    """Draw (a, b) from the policy, u ~ Beta(a, b), and t = discretize(u, T) for every row of ``x0``."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    a, b = policy_forward(phi, x)
    u, clamped = sample_beta(a, b, rng)
    return TimestepDraw(a=a, b=b, u=u, t=discretize(u, T), log_density=beta_log_density(u, a, b), clamped=clamped)


def policy_objective(phi, x0, u, delta_tilde, ent_coef):
    """delta_tilde * mean log pi(u | x0) + ent_coef * mean H(Beta(a, b)), the quantity the update ascends."""
    a, b = policy_forward(phi, np.atleast_2d(x0))
    return float(delta_tilde * np.mean(beta_log_density(u, a, b)) + ent_coef * np.mean(beta_entropy(a, b)))


def policy_gradient(phi, x0, u, delta_tilde, ent_coef):
    """Gradient of :func:`policy_objective` with respect to every policy weight."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    z, cache = _raw(phi, x)
    a = softplus(z[:, 0]) + phi.a_floor
    b = softplus(z[:, 1]) + phi.a_floor
    n = x.shape[0]
    sa, sb = beta_score(np.asarray(u), a, b)
    ea, eb = beta_entropy_grad(a, b)
    d_a = (delta_tilde * sa + ent_coef * ea) / n
    d_b = (delta_tilde * sb + ent_coef * eb) / n
    dz = np.stack([d_a * expit(z[:, 0]), d_b * expit(z[:, 1])], axis=1)
    grads, _ = nn.mlp_backward(phi.layers, cache, dz, phi.activation)
    return grads


def reinforce_update(phi, x0, draw, delta_tilde, ent_coef=1e-2, lr=1e-2, adam_state=None):
    """One ascent step on delta_tilde * log pi + ent_coef * entropy.

    Plain gradient ascent by default; pass an :class:`~timestep_lab.predictor.AdamState`
    to use Adam instead. Returns ``(phi_new, applied)``; a non-finite gradient
    leaves ``phi`` unchanged and ``applied`` False.
    """
    grads = policy_gradient(phi, x0, draw.u, delta_tilde, ent_coef)
    if not all(np.all(np.isfinite(gW)) and np.all(np.isfinite(gb)) for gW, gb in grads):
        logger.warning("non-finite policy gradient; update skipped")
        return phi, False
    params = phi.flat()
    g = nn.flatten(grads)
    if adam_state is None:
        params += lr * g
    else:
        from .predictor import adam_update

        adam_state.lr = lr
        adam_update(params, -g, adam_state)
    return phi.with_flat(params), True
