"""Discrete-time noise schedules and the constants derived from them.

Timesteps are 1-based externally (t = 1..T, t = 0 is clean data). Every
table is stored as a zero-based array, so ``table[t - 1]`` holds the value
for timestep ``t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear", "cosine", "quadratic")
VARIANCE_KINDS = ("fixed_large", "posterior")

COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray
    c: np.ndarray
    snr: np.ndarray
    variance: str = "fixed_large"
    n_clipped: int = 0
    # alpha_bar with alpha_bar_0 = 1 prepended, so alpha_bar_prev[t] is the value at t-1
    alpha_bar_prev: np.ndarray = field(repr=False, default=None)

    def _check_t(self, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ScheduleError(f"timestep out of range 1..{self.T}: {t}")
        return t_arr

    def vlb_weight(self, t):
        """c_t = beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t))."""
        t = self._check_t(t)
        return self.c[t - 1]

    def snr_at(self, t):
        t = self._check_t(t)
        return self.snr[t - 1]

    def posterior_variance(self):
        """beta_tilde_t for t = 1..T; zero at t = 1 (degenerate final step)."""
        return self.beta * (1.0 - self.alpha_bar_prev[:-1]) / (1.0 - self.alpha_bar)


def _linear_betas(T, beta_start, beta_end):
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    return beta_start + frac * (beta_end - beta_start)


def _quadratic_betas(T, beta_start, beta_end):
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    root = math.sqrt(beta_start) + frac * (math.sqrt(beta_end) - math.sqrt(beta_start))
    return root**2


def _cosine_betas(T):
    def f(t):
        return np.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    abar = f(steps) / f(0.0)
    betas = 1.0 - abar[1:] / abar[:-1]
    n_clipped = int(np.sum(betas > COSINE_MAX_BETA))
    return np.minimum(betas, COSINE_MAX_BETA), n_clipped


def build_schedule(kind="linear", T=1000, beta_start=1e-4, beta_end=0.02, variance="fixed_large"):
    """Build a :class:`NoiseSchedule`.

    ``beta_start``/``beta_end`` are ignored by the cosine schedule. ``variance``
    selects the reverse-process variance: ``"fixed_large"`` (sigma_t^2 = beta_t)
    or ``"posterior"`` (sigma_t^2 = beta_tilde_t, with t = 1 borrowing
    beta_tilde_2 because beta_tilde_1 = 0).
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if variance not in VARIANCE_KINDS:
        raise ScheduleError(f"unknown variance kind {variance!r}; expected one of {VARIANCE_KINDS}")
    T = int(T)
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    n_clipped = 0
    if kind == "linear":
        beta = _linear_betas(T, beta_start, beta_end)
    elif kind == "quadratic":
        beta = _quadratic_betas(T, beta_start, beta_end)
    else:
        beta, n_clipped = _cosine_betas(T)
        if n_clipped:
            logger.warning("cosine schedule: clipped %d betas to %g", n_clipped, COSINE_MAX_BETA)

    alpha = 1.0 - beta
    # sequential product so that alpha_bar[t] == alpha_bar[t-1] * alpha[t] bit for bit
    alpha_bar = np.empty(T)
    running = 1.0
    for i in range(T):
        running = running * alpha[i]
        alpha_bar[i] = running
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar])

    if variance == "fixed_large":
        sigma2 = beta.copy()
    else:
        post = beta * (1.0 - alpha_bar_prev[:-1]) / (1.0 - alpha_bar)
        post[0] = post[1]
        sigma2 = post

    c = beta**2 / (2.0 * sigma2 * alpha * (1.0 - alpha_bar))
    snr = alpha_bar / (1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, alpha_bar_prev, sigma2, c, snr):
        arr.setflags(write=False)
    return NoiseSchedule(
        kind=kind,
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma2=sigma2,
        c=c,
        snr=snr,
        variance=variance,
        n_clipped=n_clipped,
        alpha_bar_prev=alpha_bar_prev,
    )


def vlb_weight(s: NoiseSchedule, t):
    return s.vlb_weight(t)


def snr_at(s: NoiseSchedule, t):
    return s.snr_at(t)
