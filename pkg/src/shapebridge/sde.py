"""Finite-dimensional SDE machinery: counter-based random streams,
Euler-Maruyama integration, Brownian motion on shape coordinates and the
kernel stochastic flow in Fourier and landmark coordinates.

States may carry leading batch axes; ``drift`` maps ``(..., n) -> (..., n)``
and ``diffusion`` maps ``(..., n) -> (n, m)`` or ``(..., n, m)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import AliasingError, NumericalBlowupError
from .geometry import PlanarCurve, curve_to_fourier, synthesize_points

BLOWUP_LIMIT = 1e8


# -- random streams --------------------------------------------------------

@dataclass(frozen=True)
class CounterRng:
    """Philox stream keyed by ``(seed, stream)``.

    Philox is counter based, so a given key and draw index produce the same
    variate on every platform.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        mask = (1 << 64) - 1
        key = np.array([self.seed & mask, self.stream & mask], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "CounterRng":
        """Independent stream for e.g. one path out of many."""
        ss = np.random.SeedSequence([self.seed & ((1 << 64) - 1), self.stream & ((1 << 64) - 1), int(index)])
        return CounterRng(self.seed, int(ss.generate_state(1, np.uint64)[0]))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, CounterRng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return CounterRng(int(rng)).generator()


# -- systems ---------------------------------------------------------------

@dataclass(frozen=True)
class SdeSystem:
    """``dX = drift(t, X) dt + diffusion(t, X) dW`` on ``[0, T]``.

    ``apply_diffusion(t, x, dW)`` may be given as a fast path for
    ``diffusion(t, x) @ dW``.
    """

    state_dim: int
    noise_dim: int
    T: float
    drift: Callable
    diffusion: Callable
    diffusion_squared_fn: Optional[Callable] = None
    apply_diffusion: Optional[Callable] = None
    initial_state: Optional[np.ndarray] = None
    state_independent_diffusion: bool = False
    name: str = "sde"
    info: dict = field(default_factory=dict)

    def diffusion_squared(self, t, x):
        if self.diffusion_squared_fn is not None:
            return self.diffusion_squared_fn(t, x)
        s = self.diffusion(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def noise_term(self, t, x, dW):
        if self.apply_diffusion is not None:
            return self.apply_diffusion(t, x, dW)
        s = self.diffusion(t, x)
        return np.matmul(s, dW[..., None])[..., 0]


@dataclass
class Trajectory:
    """States on the uniform grid ``t_k = k dt``; ``states`` has shape
    ``(K + 1, n)`` or ``(K + 1, n_paths, n)``."""

    times: np.ndarray
    states: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def path(self, i: int) -> "Trajectory":
        return Trajectory(self.times, self.states[:, i])


def _check_finite(x, t, step=None):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > BLOWUP_LIMIT:
        norm = float(np.linalg.norm(x)) if np.all(np.isfinite(x)) else float("inf")
        raise NumericalBlowupError(float(t), norm, step)


def euler_maruyama_step(sys: SdeSystem, x, t: float, dt: float, dW, step=None):
    """``x + drift(t, x) dt + diffusion(t, x) dW``."""
    x = np.asarray(x, dtype=np.float64)
    out = x + sys.drift(t, x) * dt + sys.noise_term(t, x, np.asarray(dW, dtype=np.float64))
    _check_finite(out, t + dt, step)
    return out


def simulate(sys: SdeSystem, x0, K: int, rng, n_paths: Optional[int] = None,
             T: Optional[float] = None, t0: float = 0.0) -> Trajectory:
    """Euler-Maruyama with ``K`` uniform steps over ``[t0, t0 + T]``
    (``T`` defaults to the system horizon)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    gen = as_generator(rng)
    T = sys.T - t0 if T is None else T
    dt = T / K
    x = np.asarray(x0, dtype=np.float64)
    if n_paths is not None:
        x = np.broadcast_to(x, (n_paths, sys.state_dim)).copy()
    batch = x.shape[:-1]
    states = np.empty((K + 1,) + x.shape)
    states[0] = x
    sqdt = np.sqrt(dt)
    for k in range(K):
        t = t0 + k * dt
        dW = gen.standard_normal(batch + (sys.noise_dim,)) * sqdt
        x = euler_maruyama_step(sys, x, t, dt, dW, step=k + 1)
        states[k + 1] = x
    return Trajectory(t0 + dt * np.arange(K + 1), states)


def sample_marginals(sys: SdeSystem, x0, times, n_paths: int, rng, dt_max: float = 0.01) -> list:
    """States of ``n_paths`` paths at each of the (ascending) ``times``."""
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise ValueError("times must be ascending and non-negative")
    gen = as_generator(rng)
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n_paths, sys.state_dim)).copy()
    prev = 0.0
    out = []
    for t in times:
        if t > prev:
            steps = max(1, int(np.ceil((t - prev) / dt_max - 1e-9)))
            x = simulate(sys, x, steps, gen, T=t - prev, t0=prev).states[-1]
            prev = t
        out.append(x.copy())
    return out


def brownian_system(dim: int, sigma: float = 1.0, T: float = 1.0, cov=None) -> SdeSystem:
    """Driftless Brownian motion with covariance rate ``sigma^2 * cov``."""
    if cov is None:
        root = sigma * np.eye(dim)
    else:
        root = sigma * np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    a = root @ root.T

    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        return root

    def diffusion_squared(t, x):
        return a

    def apply(t, x, dW):
        return dW @ root.T

    return SdeSystem(dim, dim, T, drift, diffusion, diffusion_squared, apply,
                     state_independent_diffusion=True, name="brownian",
                     info={"sigma": sigma})


def brownian_shape_system(count: int, sigma: float, kind: str = "fourier", T: float = 1.0) -> SdeSystem:
    """Brownian motion on ``4 * count`` Fourier reals or ``2 * count`` landmark
    coordinates."""
    if count < 1:
        raise ValueError("count must be at least 1")
    dim = {"fourier": 4 * count, "landmark": 2 * count}[kind]
    return replace(brownian_system(dim, sigma, T), name=f"brownian-{kind}",
                   info={"sigma": sigma, "kind": kind, "count": count})


# -- kernel stochastic flow ------------------------------------------------

@dataclass(frozen=True)
class KernelFlowConfig:
    kernel_variance: float = 0.1
    kernel_amplitude: float = 1.0
    half_width: float = 3.0
    grid_side: int = 32
    n_state_bases: int = 8
    n_noise_bases: int = 8
    n_curve_points: Optional[int] = None
    T: float = 1.0

    def __post_init__(self):
        if not self.kernel_variance > 0:
            raise ValueError("kernel_variance must be positive")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.grid_side < 2 * self.n_noise_bases:
            raise AliasingError(
                f"grid_side={self.grid_side} cannot resolve noise frequency {self.n_noise_bases} "
                f"(need at least {2 * self.n_noise_bases})")

    @property
    def curve_points(self) -> int:
        return self.n_curve_points or 4 * self.n_state_bases

    @property
    def cell_area(self) -> float:
        return (2.0 * self.half_width / self.grid_side) ** 2

    def grid_axis(self) -> np.ndarray:
        h = 2.0 * self.half_width / self.grid_side
        return -self.half_width + h * np.arange(self.grid_side)

    def grid_nodes(self) -> np.ndarray:
        ax = self.grid_axis()
        y1, y2 = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([y1.ravel(), y2.ravel()])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KernelFlowConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown KernelFlowConfig fields: {sorted(unknown)}")
        return cls(**d)


def load_kernel_config(path) -> KernelFlowConfig:
    return KernelFlowConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def hermitian_basis(M: int) -> np.ndarray:
    """Complex matrix ``E`` with ``vec(dw) = E @ r`` for real ``r``.

    ``dw`` is indexed by ``(l + M, m + M)`` flattened row-major. ``r[0]`` is
    the real ``(0, 0)`` mode; each mode above the centre in lexicographic
    order gets ``a + ib`` from two consecutive entries of ``r`` and its mirror
    ``(-l, -m)`` gets ``a - ib``.
    """
    Q = (2 * M + 1) ** 2
    centre = (Q - 1) // 2
    E = np.zeros((Q, Q), dtype=np.complex128)
    E[centre, 0] = 1.0
    for k, j in enumerate(range(centre + 1, Q), start=1):
        mirror = Q - 1 - j
        E[j, 2 * k - 1] = 1.0
        E[j, 2 * k] = 1.0j
        E[mirror, 2 * k - 1] = 1.0
        E[mirror, 2 * k] = -1.0j
    return E


def sample_q_wiener_increment(config: KernelFlowConfig, dt: float, rng, size=None) -> np.ndarray:
    """Hermitian noise increments ``dw[l + M, m + M]``, ``|l|, |m| <= M``.

    Every real degree of freedom is ``N(0, dt)``. ``size`` prepends batch axes.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    M = config.n_noise_bases
    Q = (2 * M + 1) ** 2
    shape = () if size is None else tuple(np.atleast_1d(size))
    r = as_generator(rng).standard_normal(shape + (Q,)) * np.sqrt(dt)
    return real_to_hermitian(r, M)


def real_to_hermitian(r, M: int) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    Q = (2 * M + 1) ** 2
    centre = (Q - 1) // 2
    out = np.zeros(r.shape[:-1] + (Q,), dtype=np.complex128)
    a = r[..., 1::2]
    b = r[..., 2::2]
    out[..., centre] = r[..., 0]
    out[..., centre + 1:] = a + 1j * b
    out[..., :centre] = (a - 1j * b)[..., ::-1]
    return out.reshape(r.shape[:-1] + (2 * M + 1, 2 * M + 1))


def noise_field_on_grid(dw, config: KernelFlowConfig) -> np.ndarray:
    """Real field ``sum_{l,m} dw_{l,m} g_{l,m}(y)`` at the grid nodes (row-major)."""
    M = config.n_noise_bases
    freq = np.arange(-M, M + 1) * np.pi / config.half_width
    ax = config.grid_axis()
    g1 = np.exp(1j * np.outer(ax, freq))
    field = np.einsum("al,...lm,bm->...ab", g1, dw, g1)
    return field.real.reshape(field.shape[:-2] + (-1,))


def _gaussian_kernel(u, y, config: KernelFlowConfig):
    d2 = ((u[..., :, None, :] - y[None, :, :]) ** 2).sum(-1)
    return config.kernel_amplitude * np.exp(-d2 / (2.0 * config.kernel_variance))


def kernel_flow_coefficients(state_curve, config: KernelFlowConfig) -> np.ndarray:
    """Quadrature of ``<e_n, Q(X)(g_{l,m})>`` as ``C[..., n, l + M, m + M]``.

    ``state_curve`` is the current curve at ``P1`` uniform parameter nodes,
    shape ``(..., P1, 2)``. The inner sum over the noise grid is a 2-D
    inverse FFT; the outer sum over the curve nodes is a 1-D FFT.
    """
    pts = state_curve.points if isinstance(state_curve, PlanarCurve) else np.asarray(state_curve, dtype=np.float64)
    G, M, N = config.grid_side, config.n_noise_bases, config.n_state_bases
    P1 = pts.shape[-2]
    if N > P1:
        raise AliasingError(f"{N} state bases need at least as many curve nodes, got {P1}")
    if config.kernel_amplitude == 0.0:
        return np.zeros(pts.shape[:-2] + (N, 2 * M + 1, 2 * M + 1), dtype=np.complex128)

    ax = config.grid_axis()
    s = 1.0 / (2.0 * config.kernel_variance)
    k1 = np.exp(-s * (pts[..., :, 0, None] - ax) ** 2)
    k2 = np.exp(-s * (pts[..., :, 1, None] - ax) ** 2)
    kern = config.kernel_amplitude * k1[..., :, None] * k2[..., None, :]

    # sum_ab k_ab exp(2 pi i (l a + m b) / G) = G^2 ifft2(k)[l mod G, m mod G]
    inner = np.fft.ifft2(kern, axes=(-2, -1)) * (G * G)
    idx = np.arange(-M, M + 1) % G
    inner = inner[..., idx[:, None], idx[None, :]]
    # g_{l,m} is anchored at -L, which contributes exp(-i pi (l + m))
    sign = (-1.0) ** np.add.outer(np.arange(-M, M + 1), np.arange(-M, M + 1))
    inner = inner * sign * config.cell_area

    outer = np.fft.fft(inner, axis=-3) / P1
    return outer[..., :N, :, :]


def kernel_flow_diffusion(C: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Real diffusion matrix ``(4N, 2Q)`` from coefficients ``C`` for the
    ``[x_re, x_im, y_re, y_im]`` layout and real noise ``[r_x, r_y]``."""
    N = C.shape[-3]
    Q = E.shape[0]
    Cf = C.reshape(C.shape[:-2] + (Q,)) @ E
    block = np.concatenate([Cf.real, Cf.imag], axis=-2)
    D = np.zeros(C.shape[:-3] + (4 * N, 2 * Q))
    D[..., : 2 * N, :Q] = block
    D[..., 2 * N:, Q:] = block
    return D


def kernel_flow_system(initial_curve: PlanarCurve, config: KernelFlowConfig) -> SdeSystem:
    """Kernel stochastic flow in Fourier coordinates; zero drift."""
    N, M = config.n_state_bases, config.n_noise_bases
    Q = (2 * M + 1) ** 2
    E = hermitian_basis(M)
    P1 = config.curve_points
    x0 = curve_to_fourier(initial_curve, N).to_vector()

    def drift(t, x):
        return np.zeros_like(x)

    def coeffs(x):
        return kernel_flow_coefficients(synthesize_points(x, P1), config)

    def diffusion(t, x):
        return kernel_flow_diffusion(coeffs(x), E)

    def apply(t, x, dW):
        C = coeffs(x).reshape(x.shape[:-1] + (N, Q))
        dw = dW.reshape(dW.shape[:-1] + (2, Q)).astype(np.complex128) @ E.T
        inc = np.einsum("...nq,...cq->...cn", C, dw)
        return np.concatenate([inc[..., 0, :].real, inc[..., 0, :].imag,
                               inc[..., 1, :].real, inc[..., 1, :].imag], axis=-1)

    return SdeSystem(4 * N, 2 * Q, config.T, drift, diffusion, None, apply,
                     initial_state=x0, name="kernel-flow", info={"config": config.to_dict()})


def landmark_flow_system(initial_points: PlanarCurve, config: KernelFlowConfig) -> SdeSystem:
    """Kernel flow on landmarks: ``dx_i = sum_y k(x_i, y) dy dw_y``.

    State is ``(P, 2)`` flattened row-major; noise is one 2-D Wiener
    increment per grid node, flattened as ``(G^2, 2)``.
    """
    pts = initial_points.points if isinstance(initial_points, PlanarCurve) else np.asarray(initial_points)
    P = pts.shape[0]
    nodes = config.grid_nodes()
    n_nodes = nodes.shape[0]
    dy = config.cell_area

    def weights(x):
        return _gaussian_kernel(x.reshape(x.shape[:-1] + (P, 2)), nodes, config) * dy

    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        return np.kron(weights(x), np.eye(2)) if x.ndim == 1 else \
            np.einsum("...iy,cd->...icyd", weights(x), np.eye(2)).reshape(x.shape[:-1] + (2 * P, 2 * n_nodes))

    def diffusion_squared(t, x):
        Kw = weights(x)
        KK = Kw @ np.swapaxes(Kw, -1, -2)
        return np.einsum("...ij,cd->...icjd", KK, np.eye(2)).reshape(x.shape[:-1] + (2 * P, 2 * P))

    def apply(t, x, dW):
        disp = weights(x) @ dW.reshape(dW.shape[:-1] + (n_nodes, 2))
        return disp.reshape(x.shape)

    return SdeSystem(2 * P, 2 * n_nodes, config.T, drift, diffusion, diffusion_squared, apply,
                     initial_state=pts.ravel().copy(), name="landmark-flow",
                     info={"config": config.to_dict()})


# -- trajectory io ---------------------------------------------------------

def write_trajectory_csv(traj: Trajectory, path) -> None:
    if traj.states.ndim != 2:
        raise ValueError("write one path at a time")
    n = traj.states.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"x{i}" for i in range(n)])
        for k, (t, x) in enumerate(zip(traj.times.tolist(), traj.states.tolist())):
            w.writerow([k, repr(t)] + [repr(v) for v in x])


def write_trajectory_jsonl(traj: Trajectory, path) -> None:
    if traj.states.ndim != 2:
        raise ValueError("write one path at a time")
    with open(path, "w", encoding="utf-8") as fh:
        for k, (t, x) in enumerate(zip(traj.times.tolist(), traj.states.tolist())):
            fh.write(json.dumps({"k": k, "t": t, "state": x}) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))[1:]
    times = np.array([float(r[1]) for r in rows])
    states = np.array([[float(v) for v in r[2:]] for r in rows])
    return Trajectory(times, states)
