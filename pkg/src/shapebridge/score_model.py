"""Dense U-net score network with sinusoidal time embedding.

Each block is ``dense -> SiLU -> dense -> SiLU``, then the projected time
embedding is added and the result is batch normalized. Encoder blocks use
``down_dims``; decoder blocks use ``up_dims`` and receive the matching
encoder output added to their input. A zero-initialized dense layer maps
back to ``io_dim``.

Everything runs in float64 numpy with a hand-written reverse pass.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IncompatibleModelError, NonFiniteActivationError, PlanError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkPlan:
    io_dim: int
    time_embed_dim: int
    down_dims: tuple
    up_dims: tuple
    activation: str = "silu"
    horizon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "down_dims", tuple(int(d) for d in self.down_dims))
        object.__setattr__(self, "up_dims", tuple(int(d) for d in self.up_dims))
        if self.time_embed_dim % 2:
            raise PlanError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.up_dims != self.down_dims[::-1]:
            raise PlanError("up_dims must mirror down_dims")
        if self.activation != "silu":
            raise PlanError(f"unsupported activation {self.activation!r}")
        if not self.down_dims:
            raise PlanError("need at least one block")

    @classmethod
    def for_bases(cls, n_bases: int, horizon: float = 1.0) -> "NetworkPlan":
        """Layer plan for ``n_bases`` Fourier bases (``io_dim = 4 N``)."""
        N = n_bases
        down = (8 * N, 4 * N, 2 * N, N)
        return cls(4 * N, 4 * N, down, down[::-1], horizon=horizon)

    @classmethod
    def for_io_dim(cls, io_dim: int, horizon: float = 1.0) -> "NetworkPlan":
        """Same proportions for an arbitrary even state size, e.g. ``2P`` landmarks."""
        base = max(1, io_dim // 4)
        down = (8 * base, 4 * base, 2 * base, base)
        emb = io_dim + (io_dim % 2)
        return cls(io_dim, emb, down, down[::-1], horizon=horizon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_dims"] = list(self.down_dims)
        d["up_dims"] = list(self.up_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkPlan":
        return cls(**d)

    def blocks(self):
        """``(name, in_width, out_width)`` for each block in evaluation order."""
        out = []
        width = self.io_dim
        for i, w in enumerate(self.down_dims):
            out.append((f"down{i}", width, w))
            width = w
        for i, w in enumerate(self.up_dims):
            out.append((f"up{i}", width, w))
            width = w
        return out


@dataclass
class NetworkParams:
    """Trainable ``weights`` and batch-norm running ``stats``, both in
    declaration order."""

    weights: dict
    stats: dict = field(default_factory=dict)

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.stats.items()})


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_i = 10000^{-2i/dim}``.

    ``t`` may be a scalar (returns ``(dim,)``) or an array (returns ``(..., dim)``).
    """
    if dim % 2:
        raise PlanError(f"embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freq = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = t[..., None] * freq
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def init_params(plan: NetworkPlan, rng) -> NetworkParams:
    """Fan-in scaled Gaussian weights, zero biases, zero output layer."""
    from .sde import as_generator

    gen = as_generator(rng)
    w, s = {}, {}
    E = plan.time_embed_dim
    for name, fan_in, width in plan.blocks():
        w[f"{name}.dense1.W"] = gen.standard_normal((fan_in, width)) / np.sqrt(fan_in)
        w[f"{name}.dense1.b"] = np.zeros(width)
        w[f"{name}.dense2.W"] = gen.standard_normal((width, width)) / np.sqrt(width)
        w[f"{name}.dense2.b"] = np.zeros(width)
        w[f"{name}.time.W"] = gen.standard_normal((E, width)) / np.sqrt(E)
        w[f"{name}.time.b"] = np.zeros(width)
        w[f"{name}.bn.gamma"] = np.ones(width)
        w[f"{name}.bn.beta"] = np.zeros(width)
        s[f"{name}.bn.mean"] = np.zeros(width)
        s[f"{name}.bn.var"] = np.ones(width)
    last = plan.up_dims[-1]
    w["out.W"] = np.zeros((last, plan.io_dim))
    w["out.b"] = np.zeros(plan.io_dim)
    return NetworkParams(w, s)


def check_params(params: NetworkParams, plan: NetworkPlan) -> None:
    ref = init_params(plan, 0)
    for group, ref_group in ((params.weights, ref.weights), (params.stats, ref.stats)):
        if list(group) != list(ref_group):
            raise IncompatibleModelError("parameter names do not match the plan")
        for k, v in ref_group.items():
            if group[k].shape != v.shape:
                raise IncompatibleModelError(f"{k}: shape {group[k].shape} != {v.shape}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _finite(a, layer):
    if not np.all(np.isfinite(a)):
        raise NonFiniteActivationError(f"non-finite activations in layer {layer}")


def forward(params: NetworkParams, plan: NetworkPlan, t, x, mode: str = "eval",
            cache: Optional[dict] = None) -> np.ndarray:
    """Score estimate at times ``t`` (scalar or ``(B,)``) for states ``x``.

    ``x`` is ``(io_dim,)`` or ``(B, io_dim)``. In ``train`` mode batch
    statistics are used and the running statistics are updated in place.
    Pass a dict as ``cache`` to record what ``backward`` needs.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.shape[-1] != plan.io_dim:
        raise PlanError(f"expected inputs of width {plan.io_dim}, got {X.shape[-1]}")
    B = X.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    temb = sinusoidal_embed(tt / plan.horizon, plan.time_embed_dim)
    W = params.weights
    train = mode == "train"
    if train and B < 2:
        raise PlanError("train mode needs a batch of at least 2 samples")
    if cache is not None:
        cache.clear()
        cache["temb"] = temb
        cache["blocks"] = {}

    n_down = len(plan.down_dims)
    skips = []
    h = X
    for i, (name, _, _) in enumerate(plan.blocks()):
        if i > n_down:
            h = h + skips[2 * n_down - i]
        inp = h
        z1 = inp @ W[f"{name}.dense1.W"] + W[f"{name}.dense1.b"]
        s1 = _sigmoid(z1)
        a1 = z1 * s1
        z2 = a1 @ W[f"{name}.dense2.W"] + W[f"{name}.dense2.b"]
        s2 = _sigmoid(z2)
        a2 = z2 * s2
        u = a2 + temb @ W[f"{name}.time.W"] + W[f"{name}.time.b"]
        if train:
            mu = u.mean(axis=0)
            var = u.var(axis=0)
            params.stats[f"{name}.bn.mean"] = BN_MOMENTUM * params.stats[f"{name}.bn.mean"] + (1 - BN_MOMENTUM) * mu
            params.stats[f"{name}.bn.var"] = BN_MOMENTUM * params.stats[f"{name}.bn.var"] + (1 - BN_MOMENTUM) * var
        else:
            mu = params.stats[f"{name}.bn.mean"]
            var = params.stats[f"{name}.bn.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        uhat = (u - mu) * inv_std
        h = W[f"{name}.bn.gamma"] * uhat + W[f"{name}.bn.beta"]
        _finite(h, name)
        if cache is not None:
            cache["blocks"][name] = dict(inp=inp, z1=z1, s1=s1, a1=a1, z2=z2, s2=s2,
                                         uhat=uhat, inv_std=inv_std)
        if i < n_down:
            skips.append(h)
    top = h + skips[0]
    out = top @ W["out.W"] + W["out.b"]
    _finite(out, "out")
    if cache is not None:
        cache["top"] = top
        cache["mode"] = mode
    return out[0] if single else out


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def backward(params: NetworkParams, plan: NetworkPlan, cache: dict, grad_out) -> dict:
    """Gradients of ``sum(grad_out * forward(...))`` for every weight.

    ``cache`` must come from a ``forward`` call on the same batch. Batch
    normalization is differentiated through its batch statistics in train
    mode and treated as a fixed affine map in eval mode.
    """
    W = params.weights
    G = np.asarray(grad_out, dtype=np.float64)
    if G.ndim == 1:
        G = G[None]
    grads = {k: None for k in W}
    temb = cache["temb"]
    train = cache["mode"] == "train"
    B = G.shape[0]

    grads["out.W"] = cache["top"].T @ G
    grads["out.b"] = G.sum(axis=0)
    d_top = G @ W["out.W"].T

    n_down = len(plan.down_dims)
    blocks = plan.blocks()
    # gradient reaching each encoder output through skip connections
    pending = [d_top] + [0.0] * (n_down - 1)
    dh = d_top
    for i in range(len(blocks) - 1, -1, -1):
        name = blocks[i][0]
        c = cache["blocks"][name]
        if i < n_down:
            dh = dh + pending[i]

        gamma = W[f"{name}.bn.gamma"]
        grads[f"{name}.bn.gamma"] = (dh * c["uhat"]).sum(axis=0)
        grads[f"{name}.bn.beta"] = dh.sum(axis=0)
        duhat = dh * gamma
        if train:
            du = c["inv_std"] / B * (B * duhat - duhat.sum(axis=0) - c["uhat"] * (duhat * c["uhat"]).sum(axis=0))
        else:
            du = duhat * c["inv_std"]

        grads[f"{name}.time.W"] = temb.T @ du
        grads[f"{name}.time.b"] = du.sum(axis=0)
        dz2 = du * _silu_grad(c["z2"], c["s2"])
        grads[f"{name}.dense2.W"] = c["a1"].T @ dz2
        grads[f"{name}.dense2.b"] = dz2.sum(axis=0)
        da1 = dz2 @ W[f"{name}.dense2.W"].T
        dz1 = da1 * _silu_grad(c["z1"], c["s1"])
        grads[f"{name}.dense1.W"] = c["inp"].T @ dz1
        grads[f"{name}.dense1.b"] = dz1.sum(axis=0)
        d_inp = dz1 @ W[f"{name}.dense1.W"].T

        if i > n_down:
            pending[2 * n_down - i] = pending[2 * n_down - i] + d_inp
        dh = d_inp
    return grads


def flatten(arrays: dict) -> np.ndarray:
    """Concatenate arrays in dict order into one little-endian float64 vector."""
    if not arrays:
        return np.zeros(0, dtype="<f8")
    return np.concatenate([np.ravel(a) for a in arrays.values()]).astype("<f8")


def unflatten(flat: np.ndarray, like: dict) -> dict:
    """Inverse of ``flatten`` using the names and shapes of ``like``."""
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(v.size for v in like.values())
    if flat.size != total:
        raise IncompatibleModelError(f"expected {total} values, found {flat.size}")
    out, pos = {}, 0
    for k, v in like.items():
        out[k] = flat[pos:pos + v.size].reshape(v.shape).copy()
        pos += v.size
    return out


@dataclass
class Checkpoint:
    plan: NetworkPlan
    params: NetworkParams
    step: int = 0
    adam: Optional[dict] = None  # {"m": dict, "v": dict, "t": int}


def save_checkpoint(path, plan: NetworkPlan, params: NetworkParams, step: int = 0,
                    adam: Optional[dict] = None) -> Path:
    """Write a versioned ``.npz`` checkpoint; parameters are stored flat in
    declaration order as little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": np.array("shapebridge-checkpoint"),
        "version": np.array(CHECKPOINT_VERSION, dtype="<i8"),
        "plan": np.array(json.dumps(plan.to_dict(), sort_keys=True)),
        "step": np.array(int(step), dtype="<i8"),
        "weights": flatten(params.weights),
        "stats": flatten(params.stats),
    }
    if adam is not None:
        payload["adam_m"] = flatten(adam["m"])
        payload["adam_v"] = flatten(adam["v"])
        payload["adam_t"] = np.array(int(adam["t"]), dtype="<i8")
    # write through a handle so numpy does not append a second suffix
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_plan: Optional[NetworkPlan] = None) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises ``IncompatibleModelError`` if the file is not a checkpoint, has an
    unknown version, or its plan differs from ``expect_plan``.
    """
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise IncompatibleModelError(f"{path}: not a readable checkpoint ({exc})") from exc
    if str(data.get("format", "")) != "shapebridge-checkpoint":
        raise IncompatibleModelError(f"{path}: not a shapebridge checkpoint")
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise IncompatibleModelError(f"{path}: unsupported checkpoint version {int(data['version'])}")
    try:
        plan = NetworkPlan.from_dict(json.loads(str(data["plan"])))
    except (TypeError, ValueError, PlanError) as exc:
        raise IncompatibleModelError(f"{path}: bad plan record ({exc})") from exc
    if expect_plan is not None and plan != expect_plan:
        raise IncompatibleModelError(f"{path}: checkpoint plan {plan} does not match {expect_plan}")
    ref = init_params(plan, 0)
    params = NetworkParams(unflatten(data["weights"], ref.weights), unflatten(data["stats"], ref.stats))
    adam = None
    if "adam_m" in data:
        adam = {"m": unflatten(data["adam_m"], ref.weights),
                "v": unflatten(data["adam_v"], ref.weights),
                "t": int(data["adam_t"])}
    return Checkpoint(plan, params, int(data["step"]), adam)
