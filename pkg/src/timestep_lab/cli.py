"""Command-line entry point: ``timestep-lab <subcommand> ...``.

Every subcommand prints one JSON object on stdout when it succeeds. On
failure the process exits with status 1 (2 for usage errors) and prints
``{"error": <kind>, "message": <text>}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import delta, profiler
from .config import ExperimentConfig, config_from_dict, load_config
from .data import make_dataset
from .diffusion import ancestral_sample
from .metrics import energy_distance
from .predictor import load_checkpoint
from .schedules import build_schedule
from .training import forward_pass_budget, reference_set, stream, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=_jsonable)
    sys.stdout.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _context(ckpt, config_path=None):
    """Checkpoint contents plus the config, schedule and dataset it was trained with."""
    state = load_checkpoint(ckpt)
    if config_path:
        cfg = load_config(config_path)
    elif "config" in state["meta"]:
        cfg = config_from_dict(state["meta"]["config"])
    else:
        cfg = ExperimentConfig()
        cfg.schedule.T = state["theta"].T
    if cfg.schedule.T != state["theta"].T:
        raise ValueError(f"config T={cfg.schedule.T} does not match checkpoint T={state['theta'].T}")
    sc = cfg.schedule
    s = build_schedule(sc.kind, sc.T, sc.beta_start, sc.beta_end, sc.variance)
    data = make_dataset(cfg.dataset.kind, cfg.dataset.n, cfg.dataset.seed, **cfg.dataset.params).x0
    return state, cfg, s, data


def cmd_train(args):
    cfg = load_config(args.config)
    cfg.output_dir = str(args.out)
    if args.K is not None:
        cfg.K = args.K
    m = train(cfg.validate(), progress=args.progress)
    k, vlb = m.eval_curve()
    _emit(
        {
            "output_dir": cfg.output_dir,
            "K": cfg.K,
            "final_tracked_vlb": float(vlb[-1]),
            "final_energy_distance": m.evals[-1]["energy_distance"],
            "counters": m.counters,
            "expected_delta_passes": forward_pass_budget(cfg)["delta_passes"],
            "timings": m.timings,
        }
    )


def cmd_profile_variance(args):
    state, cfg, s, data = _context(args.ckpt, args.config)
    grid = profiler.default_grid(s.T, args.grid)
    prof = profiler.variance_profile(
        state["theta"], s, data, grid, args.n, np.random.default_rng(args.seed), epoch=args.epoch, weighted=args.weighted
    )
    path = profiler.write_variance_csv(args.out, [prof])
    _emit({"csv": path, "points": int(grid.size), "n": args.n, "weighted": args.weighted})


def _parse_range(text):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--range must look like LO:HI, got {text!r}") from None
    return lo, hi


def cmd_interdependence(args):
    state, cfg, s, data = _context(args.ckpt, args.config)
    lo, hi = _parse_range(args.range)
    icfg = profiler.InterdependenceConfig(
        t_range=(lo, hi), steps=args.steps, batch_size=args.batch, lr=args.lr, probe_size=args.probe, seed=args.seed
    )
    res = profiler.interdependence_experiment(state["theta"], s, data, icfg, state.get("adam"))
    path = profiler.write_interdependence_csv(args.out, res)
    inside = res.delta[lo - 1 : hi - 1]
    outside = np.delete(res.delta, np.arange(lo - 1, hi - 1))
    _emit(
        {
            "csv": path,
            "range": [lo, hi],
            "steps": args.steps,
            "mean_delta_inside": float(inside.mean()),
            "mean_delta_outside": float(outside.mean()) if outside.size else None,
        }
    )


def cmd_delta_eval(args):
    before, cfg, s, data = _context(args.ckpt_before, args.config)
    after = load_checkpoint(args.ckpt_after)
    rng = np.random.default_rng(args.seed)
    taus = [int(v) for v in args.subset.split(",")] if args.subset else delta.fallback_subset(s.T).S
    batch = data[rng.integers(0, data.shape[0], size=args.batch)]
    out = {
        "S": np.asarray(taus),
        "batch_size": args.batch,
        "weighted": not args.unweighted,
        "delta_tilde": delta.approx_delta(before["theta"], after["theta"], s, batch, taus, rng, weighted=not args.unweighted),
    }
    if args.full:
        probe_id = int(rng.integers(0, data.shape[0]))
        sweep = delta.full_delta_sweep(before["theta"], after["theta"], s, data[probe_id], rng, weighted=not args.unweighted, x0_id=probe_id)
        out.update(delta_full=sweep.target, probe_id=probe_id)
        if args.out:
            path = Path(args.out)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(("tau", "delta"))
                writer.writerows((i + 1, repr(float(d))) for i, d in enumerate(sweep.deltas))
            out["csv"] = path
    _emit(out)


def cmd_generate(args):
    state, cfg, s, data = _context(args.ckpt, args.config)
    theta = state["theta"]
    if args.ema:
        if "ema" not in state:
            raise ValueError(f"{args.ckpt} has no EMA weights")
        theta = theta.with_flat(state["ema"])
    samples = ancestral_sample(theta, s, args.n, stream(args.seed, "generate"))
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(samples.shape[1])])
        writer.writerows([repr(float(v)) for v in row] for row in samples)
    result = {"csv": path, "n": args.n, "ema": args.ema}
    if args.n > 0:
        result["energy_distance"] = energy_distance(samples, reference_set(cfg))
    _emit(result)


def cmd_cost_model(args):
    m = profiler.CostModel(subset_size=args.subset, batch_size=args.batch, T=args.T, f_s=args.fs)
    cost, ratio = profiler.cost_model_eval(m)
    _emit({"subset_size": args.subset, "batch_size": args.batch, "T": args.T, "f_s": args.fs, "delta_cost": cost, "overhead_ratio": ratio})


def build_parser():
    p = _Parser(prog="timestep-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--K", type=int, default=None, help="override the iteration budget")
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    def with_ckpt(sp, name="--ckpt"):
        sp.add_argument(name, required=True)
        sp.add_argument("--config", default=None, help="config to use instead of the one stored in the checkpoint")
        sp.add_argument("--seed", type=int, default=0)

    pv = sub.add_parser("profile-variance", help="per-timestep gradient variance of a checkpoint")
    with_ckpt(pv)
    pv.add_argument("--grid", type=int, default=50)
    pv.add_argument("--n", type=int, default=256)
    pv.add_argument("--epoch", type=int, default=0)
    pv.add_argument("--weighted", action="store_true")
    pv.add_argument("--out", type=Path, default=Path("variance_profile.csv"))
    pv.set_defaults(func=cmd_profile_variance)

    it = sub.add_parser("interdependence", help="train on a restricted timestep range and report loss changes")
    with_ckpt(it)
    it.add_argument("--range", default="1:200")
    it.add_argument("--steps", type=int, default=2000)
    it.add_argument("--batch", type=int, default=128)
    it.add_argument("--lr", type=float, default=2e-4)
    it.add_argument("--probe", type=int, default=64)
    it.add_argument("--out", type=Path, default=Path("interdependence.csv"))
    it.set_defaults(func=cmd_interdependence)

    de = sub.add_parser("delta-eval", help="objective drop between two checkpoints")
    with_ckpt(de, "--ckpt-before")
    de.add_argument("--ckpt-after", required=True)
    de.add_argument("--full", action="store_true", help="also run the full per-timestep sweep on one probe sample")
    de.add_argument("--subset", default=None, help="comma-separated timesteps (default: quartiles)")
    de.add_argument("--batch", type=int, default=128)
    de.add_argument("--unweighted", action="store_true")
    de.add_argument("--out", type=Path, default=None, help="CSV of per-timestep drops (with --full)")
    de.set_defaults(func=cmd_delta_eval)

    g = sub.add_parser("generate", help="ancestral samples from a checkpoint")
    with_ckpt(g)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--ema", action="store_true", help="sample with the EMA weights")
    g.add_argument("--out", type=Path, default=Path("samples.csv"))
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cost-model", help="per-iteration cost of the adaptive sampler in forward-pass units")
    c.add_argument("--subset", type=int, default=3)
    c.add_argument("--batch", type=int, default=128)
    c.add_argument("--T", type=int, default=1000)
    c.add_argument("--fs", type=int, default=40)
    c.set_defaults(func=cmd_cost_model)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        json.dump({"error": "usage", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        json.dump({"error": "usage", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON record
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
