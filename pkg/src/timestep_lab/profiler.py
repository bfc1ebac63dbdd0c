"""Diagnostics: per-timestep gradient variance, restricted-range training, and the cost model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import WeightTable, weights_to_probs
from .delta import loss_grid
from .predictor import init_adam, per_sample_grads, train_step


class ProfilerError(ValueError):
    pass


@dataclass
class VarianceProfile:
    t_grid: np.ndarray
    grad_var: np.ndarray
    loss: np.ndarray
    epoch: int = 0
    weighted: bool = False

    def rows(self):
        for t, v, l in zip(self.t_grid, self.grad_var, self.loss):
            yield {"epoch": self.epoch, "t": int(t), "grad_var": repr(float(v)), "loss": repr(float(l)), "weighted_flag": int(self.weighted)}


VARIANCE_CSV_COLUMNS = ("epoch", "t", "grad_var", "loss", "weighted_flag")
INTERDEPENDENCE_CSV_COLUMNS = ("t", "loss_before", "loss_after", "delta")


def trace_variance(grads):
    """Sum over coordinates of the unbiased sample variance: sum_i ||g_i - g_bar||^2 / (n - 1)."""
    g = np.asarray(grads, dtype=np.float64)
    n = g.shape[0]
    if n < 2:
        raise ProfilerError("need at least two gradients")
    centred = g - g.mean(axis=0)
    return float(np.sum(centred * centred) / (n - 1))


def _draw_pairs(dataset, n, rng):
    idx = rng.integers(0, dataset.shape[0], size=n)
    x0 = dataset[idx]
    return x0, rng.standard_normal(x0.shape)


def grad_variance_at(theta, s, dataset, t, n, rng, weighted=False, return_loss=False):
    """Trace of the covariance of per-sample gradients at timestep ``t`` over ``n`` (x0, eps) pairs."""
    if n < 2:
        raise ProfilerError(f"n must be >= 2, got {n}")
    x0, eps = _draw_pairs(np.asarray(dataset), n, rng)
    tt = np.full(n, int(t))
    weights = np.full(n, s.c[int(t) - 1]) if weighted else None
    g = per_sample_grads(theta, s, x0, eps, tt, weights=weights, as_matrix=True)
    var = trace_variance(g)
    if not return_loss:
        return var
    loss = float(loss_grid(theta, s, x0, eps[None], [int(t)], weighted=weighted)[0])
    return var, loss


def default_grid(T, points=50):
    return np.unique(np.round(np.linspace(1, T, points)).astype(np.int64))


def variance_profile(theta, s, dataset, t_grid, n, rng, epoch=0, weighted=False):
    t_grid = np.asarray(t_grid, dtype=np.int64)
    var = np.empty(t_grid.size)
    loss = np.empty(t_grid.size)
    for i, t in enumerate(t_grid):
        var[i], loss[i] = grad_variance_at(theta, s, dataset, t, n, rng, weighted=weighted, return_loss=True)
    return VarianceProfile(t_grid, var, loss, epoch, weighted)


def write_variance_csv(path, profiles):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=VARIANCE_CSV_COLUMNS)
        writer.writeheader()
        for p in profiles:
            writer.writerows(p.rows())
    return path


def variance_proportional_sampler(profile, T):
    """Sampling table proportional to gradient variance, held constant around each grid point."""
    grid = np.asarray(profile.t_grid, dtype=np.float64)
    var = np.asarray(profile.grad_var, dtype=np.float64)
    if var.sum() <= 0:
        raise ProfilerError("gradient variance is zero everywhere")
    ts = np.arange(1, T + 1)
    nearest = np.argmin(np.abs(ts[:, None] - grid[None, :]), axis=1)
    return weights_to_probs(WeightTable(var[nearest]))


@dataclass
class InterdependenceConfig:
    t_range: tuple = (1, 200)
    steps: int = 2000
    batch_size: int = 128
    lr: float = 2e-4
    clip: float = 1.0
    probe_size: int = 64
    seed: int = 0


@dataclass
class InterdependenceResult:
    loss_before: np.ndarray
    loss_after: np.ndarray
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        self.delta = self.loss_after - self.loss_before

    def rows(self):
        for i, (lb, la, d) in enumerate(zip(self.loss_before, self.loss_after, self.delta)):
            yield {"t": i + 1, "loss_before": repr(float(lb)), "loss_after": repr(float(la)), "delta": repr(float(d))}


def probe_losses(theta, s, probe_x0, noise_table, weighted=False, chunk=250):
    """Per-timestep mean loss over a frozen probe set and ``[T, P, dim]`` noise table."""
    out = np.empty(s.T)
    for lo in range(0, s.T, chunk):
        hi = min(lo + chunk, s.T)
        out[lo:hi] = loss_grid(theta, s, probe_x0, noise_table[lo:hi], np.arange(lo + 1, hi + 1), weighted)
    return out


def interdependence_experiment(theta, s, dataset, config, adam=None):
    """Train a copy of ``theta`` with t restricted to ``[lo, hi)`` and report per-timestep loss change.

    Losses are measured before and after on the same probe set and noise
    table, so the result is a deterministic function of the seed.
    """
    lo, hi = config.t_range
    if not (1 <= lo < hi <= s.T + 1):
        raise ProfilerError(f"invalid timestep range [{lo}, {hi}) for T={s.T}")
    if config.steps < 0 or config.batch_size < 1 or config.probe_size < 1:
        raise ProfilerError("steps, batch_size and probe_size must be nonnegative/positive")
    ss = np.random.SeedSequence(config.seed)
    probe_rng, train_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    dataset = np.asarray(dataset)
    probe_x0 = dataset[probe_rng.integers(0, dataset.shape[0], size=config.probe_size)]
    noise = probe_rng.standard_normal((s.T, config.probe_size, dataset.shape[1]))

    before = probe_losses(theta, s, probe_x0, noise)
    work = theta.copy()
    opt = adam.copy() if adam is not None else init_adam(work.n_params, lr=config.lr)
    opt.lr = config.lr
    for k in range(config.steps):
        idx = train_rng.integers(0, dataset.shape[0], size=config.batch_size)
        x0 = dataset[idx]
        eps = train_rng.standard_normal(x0.shape)
        t = train_rng.integers(lo, hi, size=config.batch_size)
        train_step(work, opt, s, x0, eps, t, clip=config.clip, k=k)
    after = probe_losses(work, s, probe_x0, noise)
    return InterdependenceResult(before, after)


def write_interdependence_csv(path, result):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=INTERDEPENDENCE_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(result.rows())
    return path


@dataclass
class CostModel:
    """Per-iteration cost in units of one predictor forward on a full batch.

    A predictor iteration (forward + backward) costs ``iter_units``; the
    policy forward costs ``policy_fwd_units`` and a policy iteration
    ``policy_iter_units``.
    """

    subset_size: int = 3
    batch_size: int = 128
    T: int = 1000
    f_s: int = 40
    iter_units: float = 4.0
    policy_fwd_units: float = 1.0
    policy_iter_units: float = 4.0

    def __post_init__(self):
        for name in ("subset_size", "batch_size", "T", "f_s", "iter_units", "policy_fwd_units", "policy_iter_units"):
            if getattr(self, name) <= 0:
                raise ProfilerError(f"{name} must be positive")


def cost_model_eval(m):
    """Return ``(delta_cost, overhead_ratio)``.

    ``delta_cost = 2|S| + 2T/|B|`` forwards for one subset-approximated drop;
    ``overhead_ratio`` is the per-iteration cost with the adaptive sampler
    relative to plain training.
    """
    delta_cost = 2.0 * m.subset_size + 2.0 * m.T / m.batch_size
    total = m.iter_units + m.policy_fwd_units + (delta_cost + m.policy_iter_units) / m.f_s
    return delta_cost, total / m.iter_units
