"""Denoising score matching for the time-reversal score.

Each simulated Euler step ``x_{k-1} -> x_k`` is a Gaussian transition with
covariance ``a dt``; its score in ``x_k`` is the regression target for the
network at ``(t_k, x_k)``. Averaged over paths, the targets recover
``grad_x log p(0, x0; t_k, x_k)``.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bridge import ScoreProvider
from .errors import TrainingAbortedError
from .geometry import synthesize_points
from .score_model import (NetworkParams, NetworkPlan, backward, forward, init_params,
                          load_checkpoint, save_checkpoint)
from .sde import CounterRng, SdeSystem, Trajectory, as_generator, sample_marginals, simulate

RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batches_per_epoch: int = 40
    trajectories_per_batch: int = 50
    steps_per_trajectory: int = 100
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    floor_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.peak_lr > self.floor_lr > 0:
            raise ValueError("need peak_lr > floor_lr > 0")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        for name in ("epochs", "batches_per_epoch", "trajectories_per_batch", "steps_per_trajectory"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EvalReport:
    rmse: float
    n_eval_points: int
    wall_time: float
    epochs: int
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rmse >= 0:
            raise ValueError(f"rmse must be non-negative, got {self.rmse}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DsmBatch:
    """Flattened regression samples. ``a`` is ``(n, n)`` when shared by every
    sample, otherwise ``(S, n, n)``."""

    t: np.ndarray
    x: np.ndarray
    target: np.ndarray
    a: np.ndarray
    dt: float
    regularized: bool = False

    def __len__(self):
        return len(self.t)

    def subset(self, idx) -> "DsmBatch":
        a = self.a if self.a.ndim == 2 else self.a[idx]
        return DsmBatch(self.t[idx], self.x[idx], self.target[idx], a, self.dt, self.regularized)


def _inverse_apply(a, r):
    """Solve ``a z = r`` (``a`` shared or batched), adding a small ridge when
    ``a`` is singular. Returns ``(z, regularized)``."""
    n = a.shape[-1]
    try:
        L = np.linalg.cholesky(a)
        ok = bool(np.all(np.isfinite(L))) and np.min(np.abs(np.diagonal(L, axis1=-2, axis2=-1))) > 1e-7 * np.sqrt(
            np.max(np.abs(np.diagonal(a, axis1=-2, axis2=-1))))
    except np.linalg.LinAlgError:
        ok = False
    regularized = not ok
    if regularized:
        ridge = RIDGE_SCALE * np.trace(a, axis1=-2, axis2=-1) / n
        a = a + np.asarray(ridge)[..., None, None] * np.eye(n)
    if a.ndim == 2:
        z = np.linalg.solve(a, r.T).T
    else:
        z = np.linalg.solve(a, r[..., None])[..., 0]
    return z, regularized


def dsm_targets(traj: Trajectory, sys: SdeSystem) -> DsmBatch:
    """One regression sample per step and path, ``k = 1..K``."""
    X = traj.states
    if X.ndim == 2:
        X = X[:, None]
    K, P, n = X.shape[0] - 1, X.shape[1], X.shape[2]
    dt = traj.dt
    prev = X[:-1].reshape(K * P, n)
    nxt = X[1:].reshape(K * P, n)
    t_prev = np.repeat(traj.times[:-1], P)
    if sys.state_independent_diffusion:
        b = sys.drift(traj.times[0], prev)
        a = np.asarray(sys.diffusion_squared(traj.times[0], prev[0]), dtype=np.float64)
    else:
        b = np.concatenate([sys.drift(t, X[k]) for k, t in enumerate(traj.times[:-1])])
        a = np.concatenate([np.broadcast_to(sys.diffusion_squared(t, X[k]), (P, n, n))
                            for k, t in enumerate(traj.times[:-1])])
    resid = nxt - prev - b * dt
    z, regularized = _inverse_apply(a, resid)
    return DsmBatch(t_prev + dt, nxt, -z / dt, a, dt, regularized)


def _quad(a, r):
    """``a r`` row-wise."""
    return r @ a.T if a.ndim == 2 else np.matmul(a, r[..., None])[..., 0]


def dsm_loss(params: NetworkParams, plan: NetworkPlan, batch: DsmBatch, with_grad: bool = True):
    """Mean of ``dt (s - target)^T a (s - target)`` and its gradients.

    The network runs in train mode, so batch-norm running statistics are
    updated. Returns ``(loss, grads)``; ``grads`` is ``None`` without
    ``with_grad``.
    """
    cache = {} if with_grad else None
    s = forward(params, plan, batch.t, batch.x, mode="train", cache=cache)
    r = s - batch.target
    ar = _quad(batch.a, r)
    S = len(batch)
    loss = float(batch.dt * np.sum(r * ar) / S)
    if not with_grad:
        return loss, None
    # a is symmetric so d/ds of r^T a r is 2 a r
    grads = backward(params, plan, cache, 2.0 * batch.dt * ar / S)
    return loss, grads


def lr_schedule(step: int, config: TrainConfig, total_steps: Optional[int] = None) -> float:
    """Learning rate for the ``step``-th update (1-based): linear warmup to
    the peak, cosine decay to the floor at ``total_steps``, floor afterwards."""
    total = config.total_steps if total_steps is None else total_steps
    W = config.warmup_steps
    if step <= W:
        return config.peak_lr * max(step, 0) / W
    if step >= total:
        return config.floor_lr
    progress = (step - W) / (total - W)
    return config.floor_lr + (config.peak_lr - config.floor_lr) * 0.5 * (1.0 + np.cos(np.pi * progress))


def adam_init(params: NetworkParams) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.weights.items()},
            "v": {k: np.zeros_like(v) for k, v in params.weights.items()},
            "t": 0}


def adam_step(params: NetworkParams, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update. Returns ``(params, state)``."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, w in params.weights.items():
        g = grads[k]
        m = state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * g
        v = state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * g * g
        params.weights[k] = w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def network_score(params: NetworkParams, plan: NetworkPlan) -> ScoreProvider:
    """Wrap a network as an eval-mode score provider."""
    return ScoreProvider("learned", lambda t, x: forward(params, plan, t, x, mode="eval"),
                         {"plan": plan})


def eval_times(T: float, n_times: int = 10) -> np.ndarray:
    return np.linspace(0.05, 0.95, n_times) * T


def eval_rmse(model: ScoreProvider, oracle: ScoreProvider, sys: SdeSystem, x0,
              n_points: int = 100, n_times: int = 10, rng=0,
              synth_points: Optional[int] = 100) -> EvalReport:
    """RMSE between ``model`` and ``oracle`` on states drawn from the
    unconditioned process at ``n_times`` interior times.

    For Fourier-coefficient systems both scores are synthesized onto
    ``synth_points`` curve points first; pass ``synth_points=None`` to
    compare raw components.
    """
    start = time.perf_counter()
    times = eval_times(sys.T, n_times)
    states = sample_marginals(sys, x0, times, n_points, as_generator(rng))
    fourier = sys.info.get("kind") == "fourier" and synth_points is not None
    sq, count = 0.0, 0
    for t, X in zip(times, states):
        diff = np.asarray(model(t, X)) - np.asarray(oracle(t, X))
        if fourier:
            diff = synthesize_points(diff, synth_points)
        sq += float(np.sum(diff ** 2))
        count += diff.size
    rmse = float(np.sqrt(sq / count))
    return EvalReport(rmse, n_points * n_times, time.perf_counter() - start, 0)


@dataclass
class TrainResult:
    params: NetworkParams
    report: Optional[EvalReport]
    history: list
    step: int
    adam: dict


def _append_loss_row(path: Path, row):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "mean_loss", "lr"])
        w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


def train(sys: SdeSystem, x0, plan: NetworkPlan, config: TrainConfig,
          out_dir=None, resume=None, oracle: Optional[ScoreProvider] = None,
          eval_kwargs: Optional[dict] = None, log=None) -> TrainResult:
    """Fit the time-reversal score of ``sys`` started at ``x0``.

    Batch ``j`` (0-based, counted over the whole run) draws its paths from
    ``CounterRng(seed).child(j)``, so resumed and uninterrupted runs see the
    same data. With ``out_dir`` a checkpoint and the loss CSV are written
    after every epoch. With ``oracle`` an ``EvalReport`` is computed at the end.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    started = time.perf_counter()
    if resume is not None:
        ck = load_checkpoint(resume, expect_plan=plan)
        params, step = ck.params, ck.step
        adam = ck.adam if ck.adam is not None else adam_init(params)
    else:
        params = init_params(plan, CounterRng(config.seed, stream=1).generator())
        step = 0
        adam = adam_init(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    root = CounterRng(config.seed)
    total = config.total_steps
    history = []
    regularized = False
    B = config.batches_per_epoch
    while step < total:
        epoch = step // B
        losses = []
        lr = 0.0
        for _ in range(B - step % B):
            gen = root.child(step).generator()
            traj = simulate(sys, x0, config.steps_per_trajectory, gen, n_paths=config.trajectories_per_batch)
            batch = dsm_targets(traj, sys)
            regularized |= batch.regularized
            loss, grads = dsm_loss(params, plan, batch)
            if not np.isfinite(loss):
                raise TrainingAbortedError(f"non-finite loss at step {step + 1} (epoch {epoch + 1})")
            step += 1
            lr = lr_schedule(step, config, total)
            adam_step(params, grads, adam, lr, config.beta1, config.beta2, config.eps)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        history.append((epoch + 1, mean_loss, lr))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} loss {mean_loss:.6g} lr {lr:.3g}")
        if out is not None:
            save_checkpoint(out / "checkpoint.npz", plan, params, step, adam)
            _append_loss_row(out / "loss.csv", history[-1])
    wall = time.perf_counter() - started
    report = None
    if oracle is not None:
        ev = eval_rmse(network_score(params, plan), oracle, sys, x0,
                       rng=CounterRng(config.seed, stream=2).generator(), **(eval_kwargs or {}))
        report = EvalReport(ev.rmse, ev.n_eval_points, wall, config.epochs)
        if regularized:
            report.notes.append("singular diffusion: DSM targets used a ridge-regularized solve")
        if not sys.state_independent_diffusion:
            report.notes.append("reverse drift omits the divergence of the diffusion matrix")
        if out is not None:
            (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return TrainResult(params, report, history, step, adam)
