"""Doob h-transforms: closed-form Brownian scores, score-augmented drift,
Monte Carlo estimates of h, and bridge samplers.

For Brownian motion with covariance rate ``C`` every h-function used here is
Gaussian, so its log-gradient is available in closed form. The normalizing
constant of h is never formed; it drops out of ``grad log h``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import HorizonError, IllConditionedCovarianceError
from .sde import (SdeSystem, Trajectory, as_generator, brownian_system, euler_maruyama_step,
                  sample_marginals, simulate)

SCORE_KINDS = ("closed_form_exact", "closed_form_inexact", "learned", "monte_carlo", "zero")


@dataclass(frozen=True)
class ScoreProvider:
    """``evaluate(t, x)`` returns ``grad_x log h(t, x)``; ``x`` may be batched."""

    kind: str
    fn: Callable
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")

    def evaluate(self, t, x):
        return self.fn(t, x)

    __call__ = evaluate


@dataclass(frozen=True)
class BridgeTarget:
    mode: str
    target: np.ndarray
    obs_variance: float = 0.0

    def __post_init__(self):
        if self.mode not in ("exact", "inexact"):
            raise ValueError(f"mode must be 'exact' or 'inexact', got {self.mode!r}")
        if self.mode == "inexact" and not self.obs_variance > 0:
            raise ValueError("inexact matching needs a positive observation variance")
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))


def _as_cov(C, n):
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 0:
        return float(C) * np.eye(n)
    return C


def _solve_spd(A, rhs):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedCovarianceError("covariance is not positive definite") from exc
    if np.linalg.cond(L) ** 2 > 1e14:
        raise IllConditionedCovarianceError(f"covariance condition number {np.linalg.cond(A):.3g} is too large")
    # rhs may be batched along leading axes
    z = np.linalg.solve(L, np.moveaxis(rhs, -1, 0).reshape(A.shape[0], -1))
    sol = np.linalg.solve(L.T, z)
    return np.moveaxis(sol.reshape((A.shape[0],) + rhs.shape[:-1]), 0, -1)


def bm_exact_bridge_score(x, t, y, C, T):
    """``C^{-1} (y - x) / (T - t)``: score of the Brownian transition density to ``y``."""
    if t >= T:
        raise HorizonError(f"exact bridge score needs t < T (t={t}, T={T})")
    x = np.asarray(x, dtype=np.float64)
    C = _as_cov(C, x.shape[-1])
    return _solve_spd(C, np.asarray(y) - x) / (T - t)


def bm_inexact_score(x, t, V, sigma_obs, C, T):
    """Score of ``h(t, x) = E[k_sigma(V, X_T) | X_t = x]`` for Brownian motion:
    ``-(sigma_obs I + (T - t) C)^{-1} (x - V)``."""
    if t > T:
        raise HorizonError(f"t={t} is beyond the horizon T={T}")
    if not sigma_obs > 0:
        raise ValueError("sigma_obs must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    S = sigma_obs * np.eye(n) + (T - t) * _as_cov(C, n)
    return -_solve_spd(S, x - np.asarray(V))


def bm_gaussian_h(x, t, V, sigma_obs, C, T):
    """``E[k_sigma(V, X_T) | X_t = x]`` for Brownian motion, with the kernel
    ``k_sigma(V, z) = (2 pi sigma)^{-1/2} exp(-|z - V|^2 / (2 sigma))``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    S = sigma_obs * np.eye(n) + (T - t) * _as_cov(C, n)
    d = x - np.asarray(V)
    Sinv_d = np.linalg.solve(S, np.moveaxis(d, -1, 0).reshape(n, -1))
    quad = (np.moveaxis(d, -1, 0).reshape(n, -1) * Sinv_d).sum(0).reshape(d.shape[:-1])
    _, logdet = np.linalg.slogdet(S)
    log_h = -0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi) + 0.5 * (n - 1) * np.log(2 * np.pi * sigma_obs)
    return np.exp(log_h)


def cylindrical_exact_score(x, t, y_head, C, T):
    """Exact score for conditioning only the first ``len(y_head)`` coordinates
    of a Brownian motion on the full state."""
    if t >= T:
        raise HorizonError(f"exact bridge score needs t < T (t={t}, T={T})")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    N = len(y_head)
    P = np.eye(n)[:N]
    C = _as_cov(C, n)
    head = _solve_spd(P @ C @ P.T, np.asarray(y_head) - x @ P.T) / (T - t)
    return head @ P


# -- providers -------------------------------------------------------------

def zero_score(dim: int) -> ScoreProvider:
    return ScoreProvider("zero", lambda t, x: np.zeros(np.shape(x)), {"dim": dim})


def exact_bridge_provider(y, C, T) -> ScoreProvider:
    y = np.asarray(y, dtype=np.float64)
    return ScoreProvider("closed_form_exact", lambda t, x: bm_exact_bridge_score(x, t, y, C, T),
                         {"target": y, "T": T})


def inexact_bridge_provider(V, sigma_obs, C, T) -> ScoreProvider:
    V = np.asarray(V, dtype=np.float64)
    return ScoreProvider("closed_form_inexact", lambda t, x: bm_inexact_score(x, t, V, sigma_obs, C, T),
                         {"target": V, "sigma_obs": sigma_obs, "T": T})


def cylindrical_bridge_provider(y_head, C, T) -> ScoreProvider:
    y_head = np.asarray(y_head, dtype=np.float64)
    return ScoreProvider("closed_form_exact", lambda t, x: cylindrical_exact_score(x, t, y_head, C, T),
                         {"target": y_head, "T": T})


def reversal_score_provider(x0, C) -> ScoreProvider:
    """Time-reversal score ``grad_x log p(0, x0; t, x) = -C^{-1} (x - x0) / t``
    of Brownian motion started at ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)

    def fn(t, x):
        if t <= 0:
            raise HorizonError("the transition score is singular at t = 0")
        return bm_exact_bridge_score(x, 0.0, x0, C, t)

    return ScoreProvider("closed_form_exact", fn, {"origin": x0})


def bridge_provider(target: BridgeTarget, C, T) -> ScoreProvider:
    if target.mode == "exact":
        return exact_bridge_provider(target.target, C, T)
    return inexact_bridge_provider(target.target, target.obs_variance, C, T)


def monte_carlo_provider(sys: SdeSystem, psi: Callable, n_paths: int, rng, step: float = 1e-2,
                         n_steps: int = 20) -> ScoreProvider:
    """Central differences of ``log mc_h_estimate``. Every evaluation reuses the
    same random stream, so the differences see common random numbers.

    Cost grows with dimension; meant as a cross-check for ``n <= 3``.
    """
    if sys.state_dim > 3:
        raise ValueError("the Monte Carlo score is only supported up to 3 dimensions")

    def fn(t, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for i in range(x.shape[-1]):
            e = np.zeros_like(x)
            e[..., i] = step
            hp, _ = mc_h_estimate(sys, t, x + e, psi, n_paths, rng, n_steps)
            hm, _ = mc_h_estimate(sys, t, x - e, psi, n_paths, rng, n_steps)
            out[..., i] = (np.log(hp) - np.log(hm)) / (2 * step)
        return out

    return ScoreProvider("monte_carlo", fn, {"n_paths": n_paths})


# -- conditioned dynamics --------------------------------------------------

def conditioned_system(sys: SdeSystem, score: ScoreProvider) -> SdeSystem:
    """Same diffusion, drift augmented by ``diffusion_squared @ score``."""

    def drift(t, x):
        s = score.evaluate(t, x)
        a = sys.diffusion_squared(t, x)
        return sys.drift(t, x) + np.matmul(a, s[..., None])[..., 0]

    info = dict(sys.info, base=sys, score=score)
    return replace(sys, drift=drift, name=f"{sys.name}|h", info=info)


def simulate_bridge(sys_c: SdeSystem, x0, K: int, rng, n_paths: Optional[int] = None,
                    target=None) -> Trajectory:
    """Euler-Maruyama for a conditioned system.

    With ``target`` given (exact matching) the last step carries no noise,
    since the conditioned law at ``T`` is a point mass, and its score drift is
    capped so that ``|drift * dt|`` does not exceed the distance to the target
    plus one noise standard deviation.
    """
    if target is None or "base" not in sys_c.info:
        return simulate(sys_c, x0, K, rng, n_paths=n_paths)
    base, score = sys_c.info["base"], sys_c.info["score"]
    target = np.asarray(target, dtype=np.float64)
    gen = as_generator(rng)
    dt = sys_c.T / K
    x = np.asarray(x0, dtype=np.float64)
    if n_paths is not None:
        x = np.broadcast_to(x, (n_paths, sys_c.state_dim)).copy()
    states = np.empty((K + 1,) + x.shape)
    states[0] = x
    for k in range(K):
        t = k * dt
        dW = gen.standard_normal(x.shape[:-1] + (sys_c.noise_dim,)) * np.sqrt(dt)
        if k < K - 1:
            x = euler_maruyama_step(sys_c, x, t, dt, dW, step=k + 1)
        else:
            a = base.diffusion_squared(t, x)
            push = np.matmul(a, score.evaluate(t, x)[..., None])[..., 0] * dt
            limit = np.linalg.norm(target - x, axis=-1) + np.sqrt(np.trace(a, axis1=-2, axis2=-1) * dt)
            size = np.linalg.norm(push, axis=-1)
            scale = np.where(size > limit, limit / np.maximum(size, 1e-300), 1.0)
            x = x + base.drift(t, x) * dt + push * np.asarray(scale)[..., None]
        states[k + 1] = x
    return Trajectory(dt * np.arange(K + 1), states)


def reverse_bridge(sys: SdeSystem, score: ScoreProvider, start, K: int, rng,
                   n_paths: Optional[int] = None, denoise_final: bool = True) -> Trajectory:
    """Run the time reversal of ``sys`` from ``start`` using a transition score
    ``score(t, x) ~ grad log p(0, x0; t, x)``.

    Reverse drift is ``-b + a s``; the divergence of ``a`` is omitted, which is
    exact for state-independent diffusion. The returned times are reverse
    times ``s = T - t``. With ``denoise_final`` the last step carries no noise.
    """
    gen = as_generator(rng)
    T = sys.T
    dt = T / K
    y = np.asarray(start, dtype=np.float64)
    if n_paths is not None:
        y = np.broadcast_to(y, (n_paths, sys.state_dim)).copy()
    states = np.empty((K + 1,) + y.shape)
    states[0] = y
    for j in range(K):
        t = T - j * dt
        a = sys.diffusion_squared(t, y)
        drift = -sys.drift(t, y) + np.matmul(a, score.evaluate(t, y)[..., None])[..., 0]
        dW = gen.standard_normal(y.shape[:-1] + (sys.noise_dim,)) * np.sqrt(dt)
        y = y + drift * dt
        if not (denoise_final and j == K - 1):
            y = y + sys.noise_term(t, states[j], dW)
        states[j + 1] = y
    return Trajectory(dt * np.arange(K + 1), states)


# -- Monte Carlo h ---------------------------------------------------------

def mc_h_estimate(sys: SdeSystem, t: float, xi, psi: Callable, n_paths: int, rng,
                  n_steps: int = 50):
    """Monte Carlo ``E[psi(X(T - t, xi))]`` with its standard error.

    ``psi`` maps a batch of states ``(n_paths, n)`` to ``(n_paths,)``.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if t > sys.T:
        raise HorizonError(f"t={t} is beyond the horizon T={sys.T}")
    if t == sys.T:
        return float(np.asarray(psi(xi[None]))[0]), 0.0
    traj = simulate(sys, xi, n_steps, rng, n_paths=n_paths, T=sys.T - t, t0=t)
    vals = np.asarray(psi(traj.states[-1]), dtype=np.float64)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths))


@dataclass
class MartingaleReport:
    times: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    h0: float

    def max_z(self) -> float:
        dev = np.abs(self.estimates - self.h0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.std_errors > 0, dev / self.std_errors, np.where(dev > 0, np.inf, 0.0))
        return float(z.max())


def martingale_check(sys: SdeSystem, psi: Callable, x0, times: Sequence[float], n_paths: int, rng,
                     h: Optional[Callable] = None, inner_paths: int = 200, n_steps: int = 50,
                     dt_max: float = 0.01) -> MartingaleReport:
    """Estimate ``E[h(t, X_t)]`` for each ``t`` in ``times``.

    ``h(t, x)`` may be given analytically (batched over ``x``); otherwise
    each sample is evaluated by a nested ``mc_h_estimate``.
    """
    gen = as_generator(rng)
    x0 = np.asarray(x0, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)

    def h_of(t, X):
        if h is not None:
            return np.asarray(h(t, X), dtype=np.float64)
        return np.array([mc_h_estimate(sys, t, xi, psi, inner_paths, gen, n_steps)[0] for xi in X])

    h0 = float(h_of(0.0, x0[None])[0])
    marginals = sample_marginals(sys, x0, times, n_paths, gen, dt_max=dt_max)
    est, se = [], []
    for t, X in zip(times, marginals):
        if t == 0.0:
            est.append(h0)
            se.append(0.0)
            continue
        vals = h_of(float(t), X)
        est.append(float(vals.mean()))
        se.append(float(vals.std(ddof=1) / np.sqrt(len(vals))))
    return MartingaleReport(times, np.array(est), np.array(se), h0)


# -- cylindrical projection ------------------------------------------------

def ks_critical_value(n: int, m: int, alpha: float = 0.01) -> float:
    c = np.sqrt(-0.5 * np.log(alpha / 2.0))
    return float(c * np.sqrt((n + m) / (n * m)))


def project_conditioning_check(full_dim: int, N: int, target_head, cov_diag=None, x0=None,
                               T: float = 1.0, probe_times=(0.0, 0.25, 0.5, 0.9),
                               n_paths: int = 5000, K: int = 100, marginal_time: float = 0.5,
                               rng=0, n_probes: int = 16) -> dict:
    """Compare conditioning a diagonal Brownian motion on its first ``N``
    coordinates against conditioning its ``N``-dimensional projection.

    Reports the largest score deviation on random probe states, the largest
    score assigned to unconstrained coordinates, and two-sample KS statistics
    for the head marginals at ``marginal_time`` against the 1% critical value.
    """
    gen = as_generator(rng)
    cov_diag = np.ones(full_dim) if cov_diag is None else np.asarray(cov_diag, dtype=np.float64)
    C = np.diag(cov_diag)
    C_head = C[:N, :N]
    target_head = np.asarray(target_head, dtype=np.float64)
    x0 = np.zeros(full_dim) if x0 is None else np.asarray(x0, dtype=np.float64)

    full_score = cylindrical_bridge_provider(target_head, C, T)
    head_score = exact_bridge_provider(target_head, C_head, T)

    max_dev = 0.0
    max_free = 0.0
    probes = gen.standard_normal((n_probes, full_dim))
    for t in probe_times:
        s_full = full_score.evaluate(t, probes)
        s_head = head_score.evaluate(t, probes[:, :N])
        max_dev = max(max_dev, float(np.abs(s_full[:, :N] - s_head).max()))
        max_free = max(max_free, float(np.abs(s_full[:, N:]).max(initial=0.0)))

    full_sys = conditioned_system(brownian_system(full_dim, 1.0, T, cov=C), full_score)
    head_sys = conditioned_system(brownian_system(N, 1.0, T, cov=C_head), head_score)
    k_mid = int(round(marginal_time / T * K))
    full_traj = simulate(full_sys, x0, K, gen, n_paths=n_paths)
    head_traj = simulate(head_sys, x0[:N], K, gen, n_paths=n_paths)
    ks = [stats.ks_2samp(full_traj.states[k_mid, :, i], head_traj.states[k_mid, :, i]).statistic
          for i in range(N)]
    crit = ks_critical_value(n_paths, n_paths, 0.01)
    return {
        "max_score_deviation": max_dev,
        "max_unconstrained_score": max_free,
        "ks_statistics": [float(s) for s in ks],
        "ks_critical_1pct": crit,
        "marginals_match": bool(max(ks) < crit),
    }
