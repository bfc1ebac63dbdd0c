"""The joint training loop: predictor updates with a pluggable timestep sampler,
plus the periodic drop estimate and policy update when the sampler is adaptive."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, delta, policy, predictor, profiler
from .config import ExperimentConfig, save_config
from .data import make_dataset
from .diffusion import ancestral_sample
from .metrics import energy_distance
from .schedules import build_schedule

logger = logging.getLogger(__name__)

ITER_COLUMNS = (
    "k",
    "t_mean",
    "loss",
    "delta_tilde",
    "reward",
    "S",
    "a_mean",
    "b_mean",
    "entropy",
    "delta_full",
    "delta_matched",
)
EVAL_COLUMNS = ("k", "tracked_vlb", "energy_distance")


class TrainingError(RuntimeError):
    pass


def stream(seed, name):
    """Independent counter-based generator for a named purpose (data, noise, policy, ...)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunMetrics:
    iterations: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    theta: object = None
    policy: object = None
    ema: list = None
    adam: object = None

    def record_iteration(self, row):
        if self.iterations and row["k"] <= self.iterations[-1]["k"]:
            raise TrainingError("iteration records must have increasing k")
        self.iterations.append(row)

    def record_eval(self, row):
        if self.evals and row["k"] < self.evals[-1]["k"]:
            raise TrainingError("eval records must have nondecreasing k")
        self.evals.append(row)

    def column(self, name, updates_only=False):
        rows = self.iterations
        if updates_only:
            rows = [r for r in rows if r.get("delta_tilde") is not None]
        return np.array([np.nan if r.get(name) is None else r[name] for r in rows], dtype=np.float64)

    @property
    def sampler_updates(self):
        return [r for r in self.iterations if r.get("delta_tilde") is not None]

    def eval_curve(self):
        return np.array([r["k"] for r in self.evals]), np.array([r["tracked_vlb"] for r in self.evals])

    def write_csv(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, columns, rows in (("metrics.csv", ITER_COLUMNS, self.iterations), ("evals.csv", EVAL_COLUMNS, self.evals)):
            with open(directory / name, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(columns)
                for r in rows:
                    writer.writerow([_fmt(r.get(c)) for c in columns])
        return directory


class RewardNormalizer:
    """Standardise rewards against a sliding window of recent values (current one included)."""

    def __init__(self, window=100):
        self.history = deque(maxlen=window)

    def __call__(self, x):
        self.history.append(x)
        if len(self.history) < 2:
            return 0.0
        h = np.fromiter(self.history, dtype=np.float64)
        std = h.std()
        return 0.0 if std == 0.0 else float((x - h.mean()) / std)


def tracked_vlb(theta, s, probe_x0, noise_table):
    """Mean over the probe set of sum_t c_t ||eps - eps_theta(x_t, t)||^2 with a frozen ``[T, P, dim]`` noise table."""
    return float(np.sum(profiler.probe_losses(theta, s, np.asarray(probe_x0), noise_table, weighted=True)))


class _TimestepSource:
    """Produces per-sample timesteps (and optional loss weights) for the configured sampler."""

    def __init__(self, cfg, s, data, rng, profile_rng):
        self.cfg = cfg.sampler
        self.s = s
        self.T = s.T
        self.data = data
        self.rng = rng
        self.profile_rng = profile_rng
        self.table = None
        kind = self.cfg.kind
        if kind in ("min_snr", "p2"):
            w = (
                baselines.weights_min_snr(s, self.cfg.min_snr_gamma)
                if kind == "min_snr"
                else baselines.weights_p2(s, self.cfg.p2_k, self.cfg.p2_gamma)
            )
            self.table = baselines.weights_to_probs(w) if self.cfg.role == "sampling_prob" else w

    def draw(self, k, theta, batch_size):
        kind = self.cfg.kind
        if kind == "uniform":
            return baselines.uniform_sample(self.T, self.rng, batch_size), None
        if kind in ("min_snr", "p2"):
            if self.table.mode == "sampling_prob":
                return baselines.sample_categorical(self.table, self.rng, batch_size), None
            t = baselines.uniform_sample(self.T, self.rng, batch_size)
            return t, self.table.at(t)
        if kind == "log_normal":
            return baselines.sample_lognormal_sigmoid(self.T, self.cfg.lognormal_mu, self.cfg.lognormal_sigma, self.rng, batch_size), None
        if kind == "variance_proportional":
            if k % self.cfg.varprop_refresh == 0:
                grid = profiler.default_grid(self.T, self.cfg.varprop_grid)
                prof = profiler.variance_profile(theta, self.s, self.data, grid, self.cfg.varprop_n, self.profile_rng)
                self.table = profiler.variance_proportional_sampler(prof, self.T)
            return baselines.sample_categorical(self.table, self.rng, batch_size), None
        raise TrainingError(f"sampler {kind!r} is not a fixed scheme")


def _dump_diagnostics(cfg, k, exc, extra):
    if not cfg.output_dir:
        return
    path = Path(cfg.output_dir) / "failure.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"k": k, "error": str(exc), **extra}, indent=2, default=str))


def train(cfg: ExperimentConfig, progress=False):
    """Run the configured experiment and return its :class:`RunMetrics`.

    Each iteration draws a batch, its noise and its timesteps, then takes
    one Adam step on the plain noise-prediction loss. With the adaptive
    sampler, every ``f_s`` iterations the drop in the weighted objective is
    measured on a probe sample, pushed to the queue, approximated on the
    current batch over the selected timesteps, and fed to the policy update.
    """
    cfg.validate()
    started = time.perf_counter()
    s = build_schedule(cfg.schedule.kind, cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.variance)
    data = make_dataset(cfg.dataset.kind, cfg.dataset.n, cfg.dataset.seed, **cfg.dataset.params).x0
    N, dim = data.shape
    B = cfg.optimizer.batch_size

    data_rng = stream(cfg.seed, "data")
    noise_rng = stream(cfg.seed, "noise")
    sampler_rng = stream(cfg.seed, "sampler")
    probe_rng = stream(cfg.seed, "probe")
    fidelity_rng = stream(cfg.seed, "fidelity")
    eval_rng = stream(cfg.seed, "eval")

    theta = predictor.init_predictor(
        dim, s.T, stream(cfg.seed, "init/theta"), tuple(cfg.predictor.hidden_dims), cfg.predictor.time_embed_dim, cfg.predictor.activation
    )
    adam = predictor.init_adam(theta.n_params, lr=cfg.optimizer.lr)
    ema = theta.flat()

    adaptive = cfg.sampler.kind == "adaptive"
    phi = policy.init_policy(dim, stream(cfg.seed, "init/phi"), tuple(cfg.adaptive.hidden_dims), cfg.adaptive.a_floor, cfg.adaptive.init_ab)
    phi_lr = cfg.adaptive.resolved_lr(cfg.schedule.kind)
    phi_adam = predictor.init_adam(phi.flat().size, lr=phi_lr) if cfg.adaptive.optimizer == "adam" else None
    queue = delta.DeltaQueue(cfg.delta.queue_capacity)
    normalizer = RewardNormalizer(cfg.adaptive.reward_window)
    source = None if adaptive else _TimestepSource(cfg, s, data, sampler_rng, stream(cfg.seed, "profile"))

    probe_x0 = data[eval_rng.integers(0, N, size=cfg.eval.probe_size)]
    noise_table = eval_rng.standard_normal((s.T, cfg.eval.probe_size, dim))

    train_counter = predictor.ForwardCounter()
    delta_counter = predictor.ForwardCounter()
    metrics = RunMetrics()
    metrics.counters = {"sweeps": 0, "policy_updates": 0, "policy_skipped": 0, "fallback_subsets": 0, "beta_clamped": 0}
    t_delta = 0.0

    def evaluate(k_done, final=False):
        row = {"k": k_done, "tracked_vlb": tracked_vlb(theta, s, probe_x0, noise_table), "energy_distance": None}
        if final and cfg.eval.n_generate > 0:
            gen = ancestral_sample(theta.with_flat(ema), s, cfg.eval.n_generate, stream(cfg.seed, "generate"))
            row["energy_distance"] = energy_distance(gen, reference_set(cfg))
        metrics.record_eval(row)

    if cfg.eval.every:
        evaluate(0)

    for k in range(cfg.K):
        x0 = data[data_rng.integers(0, N, size=B)]
        eps = noise_rng.standard_normal(x0.shape)
        weights = None
        draw = None
        if adaptive:
            draw = policy.draw_timestep(phi, x0, sampler_rng, s.T)
            metrics.counters["beta_clamped"] += draw.clamped
            t = draw.t
        else:
            t, weights = source.draw(k, theta, B)

        gate = adaptive and delta.cadence_gate(k, cfg.adaptive.f_s)
        theta_before = theta.copy() if gate else None
        try:
            loss = predictor.train_step(theta, adam, s, x0, eps, t, clip=cfg.optimizer.clip, weights=weights, counter=train_counter, k=k)
        except predictor.PredictorError as exc:
            _dump_diagnostics(cfg, k, exc, {"t": np.asarray(t).tolist()})
            raise
        decay = min(cfg.optimizer.ema_decay, (1.0 + k) / (10.0 + k))
        predictor.ema_update(ema, theta.buf, decay)

        row = {"k": k, "t_mean": float(np.mean(t)), "loss": loss}
        if adaptive:
            row["a_mean"] = float(np.mean(draw.a))
            row["b_mean"] = float(np.mean(draw.b))
            row["entropy"] = float(np.mean(policy.beta_entropy(draw.a, draw.b)))
        if gate:
            tic = time.perf_counter()
            probe_id = int(probe_rng.integers(0, N))
            sweep = delta.full_delta_sweep(
                theta_before, theta, s, data[probe_id], probe_rng, cfg.delta.weighted, delta_counter, k=k, x0_id=probe_id
            )
            delta.push_sweep(queue, sweep)
            metrics.counters["sweeps"] += 1
            if len(queue) >= 2:
                subset = delta.select_timesteps(queue, cfg.delta.subset_size)
            elif cfg.delta.fallback == "quartiles":
                subset = delta.fallback_subset(s.T)
                metrics.counters["fallback_subsets"] += 1
            else:
                subset = None
            if subset is not None:
                d_tilde = delta.approx_delta(theta_before, theta, s, x0, subset, probe_rng, cfg.delta.weighted, delta_counter)
                reward = normalizer(d_tilde)
                phi, applied = policy.reinforce_update(phi, x0, draw, reward, cfg.adaptive.ent_coef, phi_lr, phi_adam)
                metrics.counters["policy_updates" if applied else "policy_skipped"] += 1
                row.update(delta_tilde=d_tilde, reward=reward, S=";".join(str(int(v)) for v in subset.S))
                if cfg.delta.fidelity_check:
                    row["delta_full"], row["delta_matched"] = _matched_fidelity(
                        theta_before, theta, s, x0[: cfg.delta.fidelity_rows], subset.S, fidelity_rng, cfg.delta.weighted
                    )
            t_delta += time.perf_counter() - tic
        metrics.record_iteration(row)

        if cfg.eval.every and (k + 1) % cfg.eval.every == 0 and k + 1 < cfg.K:
            evaluate(k + 1)
        if cfg.output_dir and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            predictor.save_checkpoint(
                Path(cfg.output_dir) / f"ckpt_{k + 1:07d}.npz", theta, adam, ema, phi if adaptive else None, meta=_ckpt_meta(cfg, k + 1)
            )
        if progress and (k + 1) % 1000 == 0:
            logger.info("k=%d loss=%.4f", k + 1, loss)

    evaluate(cfg.K, final=True)
    metrics.counters.update(
        train_passes=train_counter.passes,
        train_rows=train_counter.rows,
        delta_passes=delta_counter.passes,
        delta_rows=delta_counter.rows,
    )
    metrics.timings = {"total_s": time.perf_counter() - started, "delta_s": t_delta}
    metrics.theta, metrics.policy, metrics.ema, metrics.adam = theta, phi, ema, adam

    if cfg.output_dir:
        out = Path(cfg.output_dir)
        metrics.write_csv(out)
        save_config(cfg, out / "config.json")
        predictor.save_checkpoint(out / "final.npz", theta, adam, ema, phi if adaptive else None, meta=_ckpt_meta(cfg, cfg.K))
        (out / "summary.json").write_text(json.dumps({"counters": metrics.counters, "timings": metrics.timings}, indent=2, sort_keys=True))
    return metrics


def _ckpt_meta(cfg, k):
    return {"k": k, "seed": cfg.seed, "config": cfg.to_dict()}


def _matched_fidelity(theta_before, theta_after, s, x0, S, rng, weighted):
    """Full mean drop over all T and its subset restriction, from one shared noise table."""
    eps = rng.standard_normal((s.T, *x0.shape))
    taus = np.arange(1, s.T + 1)
    diffs = np.empty(s.T)
    for lo in range(0, s.T, 250):
        hi = min(lo + 250, s.T)
        diffs[lo:hi] = delta.loss_grid(theta_before, s, x0, eps[lo:hi], taus[lo:hi], weighted) - delta.loss_grid(
            theta_after, s, x0, eps[lo:hi], taus[lo:hi], weighted
        )
    return float(diffs.mean()), float(diffs[np.asarray(S) - 1].mean())


def reference_set(cfg):
    """Held-out samples from the training distribution, scaled with the training set's statistics."""
    d = cfg.dataset
    raw_train = make_dataset(d.kind, d.n, d.seed, standardize=False, **d.params).x0
    raw_ref = make_dataset(d.kind, cfg.eval.n_reference, d.seed + 7919, standardize=False, **d.params).x0
    return (raw_ref - raw_train.mean(axis=0)) / raw_train.std(axis=0)


def forward_pass_budget(cfg):
    """Symbolic predictor-pass and row counts implied by a config, for checking the counters.

    Returns a dict with the number of drop-estimation events, the passes and
    rows they cost (2T probe passes of one row, plus 2|S| batch passes each),
    and the total in units of one full-batch forward.
    """
    if cfg.sampler.kind != "adaptive":
        return {"events": 0, "delta_passes": 0, "delta_rows": 0, "fwd_units": 0.0}
    T = cfg.schedule.T
    B = cfg.optimizer.batch_size
    S = cfg.delta.subset_size
    events = math.ceil(cfg.K / cfg.adaptive.f_s)
    subset_sizes = [S] * events
    if cfg.delta.fallback == "quartiles":
        # the first event runs before the queue holds two sweeps
        subset_sizes[0] = delta.fallback_subset(T).S.size
    else:
        subset_sizes[0] = 0
    passes = sum(2 * T + 2 * m for m in subset_sizes)
    rows = sum(2 * T + 2 * m * B for m in subset_sizes)
    return {"events": events, "delta_passes": passes, "delta_rows": rows, "fwd_units": rows / B}
