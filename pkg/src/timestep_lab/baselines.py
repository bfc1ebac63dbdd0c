"""Baseline timestep schemes: uniform, Min-SNR and P2 weight tables, log-normal.

Weight tables work in two roles. As ``loss_weight`` they multiply the
per-sample loss; after :func:`weights_to_probs` they become a sampling
distribution over timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .policy import discretize

MODES = ("loss_weight", "sampling_prob")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class WeightTable:
    w: np.ndarray
    mode: str = "loss_weight"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if self.mode not in MODES:
            raise SamplerError(f"unknown mode {self.mode!r}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise SamplerError("weights must be finite and nonnegative")
        if w.sum() <= 0:
            raise SamplerError("weights sum to zero")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def T(self):
        return self.w.size

    def at(self, t):
        return self.w[np.asarray(t) - 1]


def uniform_sample(T, rng, size=None):
    return rng.integers(1, T + 1, size=size)


def weights_min_snr(s, gamma=5.0):
    """w_t = min(snr_t, gamma) / snr_t, the eps-prediction form of Min-SNR."""
    if gamma <= 0:
        raise SamplerError(f"gamma must be positive, got {gamma}")
    return WeightTable(np.minimum(s.snr, gamma) / s.snr)


def weights_p2(s, k=1.0, gamma=0.0):
    """w_t = 1 / (k + snr_t)^gamma."""
    if k < 0:
        raise SamplerError(f"k must be nonnegative, got {k}")
    return WeightTable(1.0 / (k + s.snr) ** gamma)


def weights_to_probs(table):
    w = table.w
    total = w.sum()
    if total <= 0:
        raise SamplerError("cannot normalise an all-zero table")
    return WeightTable(w / total, mode="sampling_prob")


def sample_categorical(p, rng, size=None):
    """Inverse-CDF draw of 1-based timesteps from a ``sampling_prob`` table."""
    if p.mode != "sampling_prob":
        raise SamplerError("sample_categorical needs a sampling_prob table")
    cdf = np.cumsum(p.w)
    u = rng.random(size) * cdf[-1]
    # side="right" so zero-probability entries are never hit
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, p.T - 1) + 1


def sample_lognormal_sigmoid(T, mu=0.0, sigma=1.0, rng=None, size=None, z=None):
    """t = discretize(sigmoid(z), T) with z ~ N(mu, sigma^2).

    Passing ``z`` bypasses the normal draw.
    """
    if sigma <= 0:
        raise SamplerError(f"sigma must be positive, got {sigma}")
    if z is None:
        z = rng.normal(mu, sigma, size=size)
    u = np.clip(expit(z), 1e-12, 1.0 - 1e-12)
    return discretize(u, T)
