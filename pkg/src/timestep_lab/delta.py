"""Objective drop before/after a predictor update, exact and subset-approximated.

``delta[tau] = L_tau(theta_before) - L_tau(theta_after)`` with the same
noise used on both sides. A FIFO queue of full sweeps feeds a univariate
F-statistic ranking that picks the few timesteps whose deltas best track
the mean drop.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .predictor import predict_eps

logger = logging.getLogger(__name__)

F_SENTINEL = float(np.finfo(np.float64).max)


class DeltaError(ValueError):
    pass


@dataclass
class DeltaSweep:
    deltas: np.ndarray
    target: float
    k: int = -1
    x0_id: int = -1


@dataclass
class SelectedSubset:
    S: np.ndarray
    f_scores: np.ndarray = None
    fallback: bool = False


@dataclass
class DeltaQueue:
    capacity: int = 20
    entries: deque = field(default=None)

    def __post_init__(self):
        if self.capacity < 1:
            raise DeltaError("queue capacity must be >= 1")
        if self.entries is None:
            self.entries = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.entries)

    def matrix(self):
        """[n_entries, T] deltas and the [n_entries] targets, oldest first."""
        return np.stack([e.deltas for e in self.entries]), np.array([e.target for e in self.entries])


def push_sweep(q, sweep):
    q.entries.append(sweep)
    return q


def cadence_gate(k, f_s):
    if f_s < 1:
        raise DeltaError(f"f_s must be >= 1, got {f_s}")
    return k % f_s == 0


def loss_grid(theta, s, x0, eps, taus, weighted=True, counter=None):
    """Mean-over-batch loss for each timestep in ``taus`` in one vectorised forward.

    ``x0`` is ``[B, dim]`` and ``eps`` is ``[len(taus), B, dim]``. Records
    ``len(taus)`` passes on ``counter``.
    """
    taus = np.asarray(taus, dtype=np.int64)
    n_tau, B, dim = eps.shape
    ab = s.alpha_bar[taus - 1][:, None, None]
    xt = np.sqrt(ab) * x0[None] + np.sqrt(1.0 - ab) * eps
    t_rows = np.repeat(taus, B)
    out = predict_eps(theta, xt.reshape(-1, dim), t_rows, counter=counter, passes=n_tau)
    d = out.reshape(n_tau, B, dim) - eps
    per_tau = np.mean(np.sum(d * d, axis=2), axis=1)
    if weighted:
        per_tau = s.c[taus - 1] * per_tau
    return per_tau


def full_delta_sweep(theta_before, theta_after, s, x0, rng, weighted=True, counter=None, k=-1, x0_id=-1):
    """delta_tau for tau = 1..T on a single probe sample; one noise per tau, shared by both snapshots."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    eps = rng.standard_normal((s.T, 1, x0.shape[1]))
    taus = np.arange(1, s.T + 1)
    before = loss_grid(theta_before, s, x0, eps, taus, weighted, counter)
    after = loss_grid(theta_after, s, x0, eps, taus, weighted, counter)
    deltas = before - after
    if not np.all(np.isfinite(deltas)):
        raise DeltaError(f"non-finite loss in delta sweep at iteration {k}")
    return DeltaSweep(deltas=deltas, target=float(np.mean(deltas)), k=k, x0_id=x0_id)


def f_statistic(feature, target):
    """Univariate regression F = r^2 (n - 2) / (1 - r^2).

    Zero-variance inputs score 0; a perfect fit scores :data:`F_SENTINEL`.
    """
    x = np.asarray(feature, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    n = x.size
    if n < 3 or y.size != n:
        raise DeltaError("f_statistic needs two equal-length vectors with n >= 3")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r2 = float(xc @ yc) ** 2 / (sxx * syy)
    if r2 >= 1.0 - 1e-15:
        return F_SENTINEL
    return r2 * (n - 2) / (1.0 - r2)


def f_scores(features, target):
    """Column-wise :func:`f_statistic` for a ``[n, T]`` feature matrix, vectorised over columns."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    n = x.shape[0]
    if n < 3 or y.shape != (n,):
        raise DeltaError("f_scores needs an [n, T] matrix and an n-vector with n >= 3")
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    sxx = np.einsum("ij,ij->j", xc, xc)
    syy = float(yc @ yc)
    out = np.zeros(x.shape[1])
    if syy == 0.0:
        return out
    live = sxx != 0.0
    r2 = (yc @ xc[:, live]) ** 2 / (sxx[live] * syy)
    with np.errstate(divide="ignore"):
        f = np.where(r2 >= 1.0 - 1e-15, F_SENTINEL, r2 * (n - 2) / np.maximum(1.0 - r2, 1e-300))
    out[live] = f
    return out


def top_k(scores, size):
    """Indices (1-based timesteps) of the ``size`` largest scores; ties go to the smaller timestep."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:size]) + 1


def select_timesteps(q, size=3):
    if len(q) < 2:
        raise DeltaError("need at least two sweeps in the queue to select timesteps")
    features, target = q.matrix()
    if features.shape[0] < 3:
        # with two entries every correlation is +1, -1 or undefined; rank by that sign
        scores = np.sign(np.diff(features, axis=0)[0] * np.diff(target)[0])
    else:
        scores = f_scores(features, target)
    return SelectedSubset(S=top_k(scores, size), f_scores=scores)


def fallback_subset(T):
    """{T/4, T/2, 3T/4}, rounded and kept inside 1..T."""
    S = np.unique(np.clip(np.round(np.array([0.25, 0.5, 0.75]) * T).astype(np.int64), 1, T))
    return SelectedSubset(S=S, fallback=True)


def approx_delta(theta_before, theta_after, s, batch, S, rng, weighted=True, counter=None, eps=None):
    """Mean over tau in S of the paired batch-loss differences.

    Noise for each tau is drawn as one ``[|S|, B, dim]`` block unless ``eps``
    is supplied.
    """
    taus = np.asarray(S.S if isinstance(S, SelectedSubset) else S, dtype=np.int64)
    if taus.size == 0:
        raise DeltaError("empty timestep subset")
    x0 = batch.x0 if hasattr(batch, "x0") else np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if eps is None:
        eps = rng.standard_normal((taus.size, *x0.shape))
    before = loss_grid(theta_before, s, x0, eps, taus, weighted, counter)
    after = loss_grid(theta_after, s, x0, eps, taus, weighted, counter)
    value = float(np.mean(before - after))
    if not np.isfinite(value):
        raise DeltaError("non-finite approximate delta")
    return value
