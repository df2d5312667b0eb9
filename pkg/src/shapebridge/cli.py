"""Command-line front end: ``shapebridge {align,simulate,train,bridge,eval}``.

Every run writes ``resolved_config.json`` into its output directory; replaying
that file with the same subcommand and inputs reproduces the outputs.
Exit codes: 0 success, 2 usage, 3 data error, 4 numerical error.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import (BridgeTarget, bridge_provider, conditioned_system, reversal_score_provider,
                     reverse_bridge, simulate_bridge)
from .errors import (AliasingError, DegenerateShapeError, HorizonError, IllConditionedCovarianceError,
                     IncompatibleModelError, InsufficientResolutionError, MalformedInputError,
                     NonFiniteActivationError, NumericalBlowupError, PlanError, ShapeBridgeError,
                     TrainingAbortedError)
from .geometry import (PlanarCurve, as_dataset, curve_to_fourier, load_curve, load_fourier,
                       procrustes_align, resample, save_curve, synthesize_points)
from .score_model import NetworkPlan, load_checkpoint
from .sde import (CounterRng, KernelFlowConfig, brownian_shape_system, kernel_flow_system,
                  simulate, write_trajectory_csv)
from .trainer import TrainConfig, eval_rmse, network_score, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "model": "brownian",
    "n_bases": 8,
    "sigma": 1.0,
    "T": 1.0,
    "kernel": {},
    "steps": 100,
    "n_paths": 1,
    "output_times": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "synth_points": 100,
    "resample_points": 100,
    "train": {},
    "bridge": {"mode": "exact", "obs_variance": 0.0, "score": "closed_form",
               "checkpoint": None, "n_paths": 20},
    "eval": {"n_points": 100, "n_times": 10},
    "align": {"points": 1000},
}

DATA_ERRORS = (MalformedInputError, DegenerateShapeError, InsufficientResolutionError,
               IncompatibleModelError, AliasingError, PlanError)
NUMERIC_ERRORS = (NumericalBlowupError, TrainingAbortedError, IllConditionedCovarianceError,
                  HorizonError, NonFiniteActivationError)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = _merge(cfg, user)
    cfg["seed"] = int(args.seed)
    cfg["threads"] = int(args.threads)
    cfg["train"] = dict(cfg["train"], seed=int(args.seed))
    if cfg["model"] not in ("brownian", "kernel"):
        raise DataError(f"unknown model {cfg['model']!r}")
    if cfg["model"] == "kernel":
        cfg["kernel"] = dict(cfg["kernel"], n_state_bases=cfg["n_bases"], T=cfg["T"])
    return cfg


def _write_snapshot(out: Path, command: str, cfg: dict, inputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "version": __version__, "inputs": inputs, "config": cfg}
    (out / "resolved_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def load_shape_vector(path, n_bases: int, resample_points: int) -> np.ndarray:
    """Coefficient vector from a Fourier JSON file or a curve file."""
    path = _require_file(path)
    if path.suffix.lower() == ".json":
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedInputError(exc.msg, path, exc.lineno) from exc
        if isinstance(obj, dict) and "n_bases" in obj:
            shape = load_fourier(path)
            if shape.n_bases != n_bases:
                raise DataError(f"{path}: has {shape.n_bases} bases, configuration needs {n_bases}")
            return shape.to_vector()
    curve = resample(load_curve(path), max(resample_points, n_bases))
    return curve_to_fourier(curve, n_bases).to_vector()


def build_system(cfg: dict, x0: np.ndarray):
    N = cfg["n_bases"]
    if cfg["model"] == "brownian":
        return brownian_shape_system(N, cfg["sigma"], "fourier", cfg["T"])
    kcfg = KernelFlowConfig.from_dict(cfg["kernel"])
    pts = synthesize_points(x0, kcfg.curve_points)
    return kernel_flow_system(PlanarCurve(pts), kcfg)


def _output_indices(cfg: dict, K: int) -> list:
    T = cfg["T"]
    idx = []
    for t in cfg["output_times"]:
        if not 0 <= t <= T + 1e-12:
            raise DataError(f"output time {t} outside [0, {T}]")
        idx.append(int(round(t / T * K)))
    return idx


def _run_paths(fn, n_paths: int, threads: int) -> list:
    """``fn(i)`` for each path, in path order; each path owns its RNG stream so
    the result does not depend on ``threads``."""
    if threads <= 1:
        return [fn(i) for i in range(n_paths)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_paths)))


def _curve_record(path_idx, t, vec, P):
    return {"path": path_idx, "t": float(t), "points": synthesize_points(vec, P).tolist()}


def _write_paths(out: Path, trajs: list) -> None:
    pdir = out / "paths"
    pdir.mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(trajs):
        write_trajectory_csv(tr, pdir / f"path_{i:03d}.csv")


# -- subcommands -----------------------------------------------------------

def cmd_align(args, cfg) -> int:
    if len(args.inputs) < 2:
        raise UsageError("align needs at least two input files")
    P = int(args.points or cfg["align"]["points"])
    cfg["align"]["points"] = P
    curves = []
    for f in args.inputs:
        curves.append(resample(load_curve(_require_file(f)), P))
    # nothing is written until every input has parsed
    aligned, mean = procrustes_align(as_dataset(curves))
    out = Path(args.out)
    _write_snapshot(out, "align", cfg, {"inputs": [str(f) for f in args.inputs]})
    for i, c in enumerate(aligned.curves):
        save_curve(c, out / f"aligned_{i:03d}.csv")
    save_curve(mean, out / "mean.csv")
    print(f"aligned {len(curves)} curves at P={P} into {out}")
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    x0 = load_shape_vector(args.initial, cfg["n_bases"], cfg["resample_points"])
    system = build_system(cfg, x0)
    K = int(cfg["steps"])
    idx = _output_indices(cfg, K)
    root = CounterRng(cfg["seed"])
    trajs = _run_paths(lambda i: simulate(system, x0, K, root.child(i).generator()),
                       int(cfg["n_paths"]), cfg["threads"])
    out = Path(args.out)
    _write_snapshot(out, "simulate", cfg, {"initial": str(args.initial)})
    _write_paths(out, trajs)
    with open(out / "curves.jsonl", "w", encoding="utf-8") as fh:
        for i, tr in enumerate(trajs):
            for k in idx:
                fh.write(json.dumps(_curve_record(i, tr.times[k], tr.states[k], cfg["synth_points"])) + "\n")
    print(f"simulated {len(trajs)} path(s) of {K} steps into {out}")
    return EXIT_OK


def _bm_cov(cfg, n):
    return cfg["sigma"] ** 2 * np.eye(n)


def _report_dict(report, extra=None) -> dict:
    d = report.to_dict() if report is not None else {"rmse": None}
    d.update(extra or {})
    return d


def cmd_train(args, cfg) -> int:
    x0 = load_shape_vector(args.target, cfg["n_bases"], cfg["resample_points"])
    if args.resume:
        _require_file(args.resume)
    system = build_system(cfg, x0)
    plan = NetworkPlan.for_bases(cfg["n_bases"], horizon=cfg["T"])
    tcfg = TrainConfig.from_dict(dict(cfg["train"], steps_per_trajectory=cfg["train"].get(
        "steps_per_trajectory", cfg["steps"])))
    cfg["train"] = tcfg.to_dict()
    oracle = reversal_score_provider(x0, _bm_cov(cfg, system.state_dim)) if cfg["model"] == "brownian" else None
    out = Path(args.out)
    _write_snapshot(out, "train", cfg, {"target": str(args.target), "resume": args.resume})
    result = train(system, x0, plan, tcfg, out_dir=out, resume=args.resume, oracle=oracle,
                   eval_kwargs=dict(cfg["eval"]), log=None if args.quiet else print)
    if result.report is None:
        (out / "report.json").write_text(json.dumps({"rmse": None, "epochs": tcfg.epochs,
                                                     "step": result.step}, indent=2) + "\n")
    print(json.dumps(_report_dict(result.report, {"step": result.step})))
    return EXIT_OK


def _endpoint_stats(ends: np.ndarray, start: np.ndarray, target: np.ndarray) -> dict:
    d = np.linalg.norm(ends - target, axis=1)
    base = float(np.linalg.norm(start - target))
    n = len(d)
    return {
        "n_paths": n,
        "mean_distance": float(d.mean()),
        "std_distance": float(d.std(ddof=1)) if n > 1 else 0.0,
        "start_to_target": base,
        "relative_distance": float(d.mean() / base) if base > 0 else None,
        "endpoint_spread": float(np.sqrt(np.mean(np.var(ends, axis=0, ddof=1)))) if n > 1 else 0.0,
    }


def cmd_bridge(args, cfg) -> int:
    N = cfg["n_bases"]
    bcfg = cfg["bridge"]
    for key in ("mode", "score", "checkpoint", "obs_variance"):
        v = getattr(args, key)
        if v is not None:
            bcfg[key] = v
    if args.paths is not None:
        bcfg["n_paths"] = args.paths
    start = load_shape_vector(args.start, N, cfg["resample_points"])
    target = load_shape_vector(args.target, N, cfg["resample_points"])
    system = build_system(cfg, start)
    K = int(cfg["steps"])
    idx = _output_indices(cfg, K)
    root = CounterRng(cfg["seed"])
    notes = []
    if bcfg["score"] == "closed_form":
        if cfg["model"] != "brownian":
            raise UsageError("closed-form scores exist only for the brownian model")
        try:
            tgt = BridgeTarget(bcfg["mode"], target, float(bcfg["obs_variance"]))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        cond = conditioned_system(system, bridge_provider(tgt, _bm_cov(cfg, system.state_dim), system.T))
        pin = target if tgt.mode == "exact" else None

        def run(i):
            return simulate_bridge(cond, start, K, root.child(i).generator(), target=pin)
    elif bcfg["score"] == "checkpoint":
        if not bcfg["checkpoint"]:
            raise UsageError("--score checkpoint needs --checkpoint PATH")
        ck = load_checkpoint(_require_file(bcfg["checkpoint"]),
                             expect_plan=NetworkPlan.for_bases(N, horizon=cfg["T"]))
        score = network_score(ck.params, ck.plan)
        if not system.state_independent_diffusion:
            notes.append("reverse drift omits the divergence of the diffusion matrix")

        def run(i):
            return reverse_bridge(system, score, start, K, root.child(i).generator())
    else:
        raise UsageError(f"unknown score source {bcfg['score']!r}")
    trajs = _run_paths(run, int(bcfg["n_paths"]), cfg["threads"])
    out = Path(args.out)
    _write_snapshot(out, "bridge", cfg, {"start": str(args.start), "target": str(args.target)})
    _write_paths(out, trajs)
    stack = np.stack([tr.states for tr in trajs], axis=1)  # (K+1, paths, n)
    with open(out / "mean_shapes.jsonl", "w", encoding="utf-8") as fh:
        for k in idx:
            m = stack[k].mean(axis=0)
            fh.write(json.dumps({"t": float(trajs[0].times[k]), "coefficients": m.tolist(),
                                 "points": synthesize_points(m, cfg["synth_points"]).tolist()}) + "\n")
    stats = _endpoint_stats(stack[-1], start, target)
    stats["notes"] = notes
    (out / "endpoint_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(stats))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    if cfg["model"] != "brownian":
        raise UsageError("evaluation needs a closed-form oracle; only the brownian model has one")
    x0 = load_shape_vector(args.target, cfg["n_bases"], cfg["resample_points"])
    system = build_system(cfg, x0)
    ck = load_checkpoint(_require_file(args.checkpoint),
                         expect_plan=NetworkPlan.for_bases(cfg["n_bases"], horizon=cfg["T"]))
    oracle = reversal_score_provider(x0, _bm_cov(cfg, system.state_dim))
    rep = eval_rmse(network_score(ck.params, ck.plan), oracle, system, x0,
                    rng=CounterRng(cfg["seed"], stream=2).generator(), **cfg["eval"])
    out = Path(args.out)
    _write_snapshot(out, "eval", cfg, {"checkpoint": str(args.checkpoint), "target": str(args.target)})
    d = _report_dict(rep, {"step": ck.step})
    (out / "eval_report.json").write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(d))
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON configuration file")
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--out", default=d("shapebridge-out"), help="output directory")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads for per-path work")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapebridge",
                                     description="Align, simulate, train and bridge stochastic shape processes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="resample and Procrustes-align curve files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--points", type=int, default=None, help="points per resampled curve")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("simulate", help="simulate the shape SDE from an initial shape")
    p.add_argument("initial")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="learn the time-reversal score of paths started at TARGET")
    p.add_argument("target")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bridge", help="sample bridges from START to TARGET")
    p.add_argument("start")
    p.add_argument("target")
    p.add_argument("--mode", choices=["exact", "inexact"], default=None)
    p.add_argument("--obs-variance", dest="obs_variance", type=float, default=None)
    p.add_argument("--score", choices=["closed_form", "checkpoint"], default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--paths", type=int, default=None)
    p.set_defaults(func=cmd_bridge)

    p = sub.add_parser("eval", help="RMSE of a checkpoint against the Brownian oracle")
    p.add_argument("checkpoint")
    p.add_argument("target")
    p.set_defaults(func=cmd_eval)

    for sp in sub.choices.values():
        _global_flags(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, *DATA_ERRORS) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ShapeBridgeError, ValueError, TypeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
