"""Forward noising, per-timestep losses, the direct KL form of the VLB, and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .predictor import predict_eps


class DiffusionError(ValueError):
    pass


@dataclass
class DataBatch:
    x0: np.ndarray

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        if self.x0.shape[0] < 1:
            raise DiffusionError("a DataBatch needs at least one sample")
        if not np.all(np.isfinite(self.x0)):
            raise DiffusionError("DataBatch contains non-finite entries")

    @property
    def dim(self):
        return self.x0.shape[1]

    def __len__(self):
        return self.x0.shape[0]


@dataclass
class NoisedBatch:
    xt: np.ndarray
    eps: np.ndarray
    t: np.ndarray


def _as_matrix(x):
    return x.x0 if isinstance(x, DataBatch) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def _timesteps(s, t, n):
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(n, int(t))
    if t.shape != (n,):
        raise DiffusionError(f"need one timestep per sample ({n}), got shape {t.shape}")
    if np.any(t < 1) or np.any(t > s.T):
        raise DiffusionError(f"timesteps must lie in 1..{s.T}")
    return t


def forward_noise(s, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, row by row."""
    x0 = _as_matrix(x0)
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t = _timesteps(s, t, x0.shape[0])
    ab = s.alpha_bar[t - 1][:, None]
    return NoisedBatch(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps, t)


def eps_loss(eps_hat, eps):
    """Squared norm summed over coordinates, averaged over the batch."""
    eps_hat = np.atleast_2d(np.asarray(eps_hat, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if eps_hat.shape != eps.shape:
        raise DiffusionError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    d = eps - eps_hat
    return float(np.mean(np.sum(d * d, axis=1)))


def per_timestep_loss(theta, s, x0, eps, t, weighted=False, counter=None):
    """Batch loss at a single shared timestep ``t``; times c_t when ``weighted``."""
    nb = forward_noise(s, x0, t, eps)
    loss = eps_loss(predict_eps(theta, nb.xt, nb.t, counter=counter), nb.eps)
    return loss * float(s.c[int(t) - 1]) if weighted else loss


def posterior_params(s, x0, xt, t):
    """Mean and variance of q(x_{t-1} | x_t, x_0).

    At t = 1 the posterior collapses onto x_0 (variance 0).
    """
    if not 1 <= t <= s.T:
        raise DiffusionError(f"timestep {t} out of range 1..{s.T}")
    ab = s.alpha_bar[t - 1]
    ab_prev = s.alpha_bar_prev[t - 1]
    beta = s.beta[t - 1]
    alpha = s.alpha[t - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    mean = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * xt) / (1.0 - ab)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean, float(var)


def model_mean(s, xt, eps_hat, t):
    """mu_theta = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)."""
    t = np.asarray(t)
    beta = s.beta[t - 1]
    ab = s.alpha_bar[t - 1]
    alpha = s.alpha[t - 1]
    if t.ndim:
        beta, ab, alpha = beta[:, None], ab[:, None], alpha[:, None]
    return (xt - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)


def gaussian_kl(mean_q, var_q, mean_p, var_p):
    """KL(N(mean_q, var_q I) || N(mean_p, var_p I)), split into (mean part, variance part)."""
    d = np.asarray(mean_q) - np.asarray(mean_p)
    dim = d.size
    mean_part = float(np.sum(d * d) / (2.0 * var_p))
    ratio = var_q / var_p
    var_part = 0.5 * dim * (ratio - 1.0 - np.log(ratio))
    return mean_part, float(var_part)


def vlb_direct(theta, s, x0, eps_per_t, return_terms=False):
    """Sum over t of Gaussian KLs between the forward posterior and p_theta.

    ``eps_per_t`` is a ``[T, dim]`` table; row ``t-1`` builds x_t. The t = 1
    term keeps only its mean part (its posterior is a point mass). With
    ``return_terms`` the per-t mean and variance parts come back as arrays.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    eps_per_t = np.asarray(eps_per_t, dtype=np.float64)
    T = s.T
    if eps_per_t.shape != (T, x0.size):
        raise DiffusionError(f"eps table must be [{T}, {x0.size}], got {eps_per_t.shape}")
    ts = np.arange(1, T + 1)
    xt = forward_noise(s, np.broadcast_to(x0, eps_per_t.shape), ts, eps_per_t).xt
    eps_hat = predict_eps(theta, xt, ts)
    mu = model_mean(s, xt, eps_hat, ts)
    mean_terms = np.empty(T)
    var_terms = np.zeros(T)
    for i, t in enumerate(ts):
        m_q, v_q = posterior_params(s, x0, xt[i], int(t))
        sigma2 = s.sigma2[i]
        if t == 1:
            d = m_q - mu[i]
            mean_terms[i] = np.sum(d * d) / (2.0 * sigma2)
        else:
            mean_terms[i], var_terms[i] = gaussian_kl(m_q, v_q, mu[i], sigma2)
    if return_terms:
        return mean_terms, var_terms
    return float(mean_terms.sum() + var_terms.sum())


def vlb_eps_form(theta, s, x0, eps_per_t):
    """Per-t terms c_t ||eps - eps_theta(x_t, t)||^2 on the same noises as :func:`vlb_direct`."""
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    ts = np.arange(1, s.T + 1)
    xt = forward_noise(s, np.broadcast_to(x0, eps_per_t.shape), ts, eps_per_t).xt
    d = eps_per_t - predict_eps(theta, xt, ts)
    return s.c * np.sum(d * d, axis=1)


def ancestral_sample(theta, s, n, rng, x_T=None, deterministic=False):
    """Draw ``n`` samples by iterating the learned reverse kernel from x_T ~ N(0, I).

    ``deterministic`` zeroes the injected noise at every step (debugging aid);
    with ``x_T`` supplied this yields a fixed trajectory.
    """
    if n == 0:
        return np.zeros((0, theta.dim))
    x = rng.standard_normal((n, theta.dim)) if x_T is None else np.array(x_T, dtype=np.float64)
    sigma = np.sqrt(s.sigma2)
    for t in range(s.T, 0, -1):
        tt = np.full(n, t)
        mu = model_mean(s, x, predict_eps(theta, x, tt), t)
        if t > 1 and not deterministic:
            x = mu + sigma[t - 1] * rng.standard_normal(x.shape)
        else:
            x = mu
    return x
