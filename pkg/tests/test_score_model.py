import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shapebridge.errors import IncompatibleModelError, NonFiniteActivationError, PlanError
from shapebridge.score_model import (NetworkPlan, backward, check_params, flatten, forward, init_params,
                                     load_checkpoint, save_checkpoint, sinusoidal_embed)

# parameter groups probed by the gradient check, keyed by the layer type they exercise
LAYER_TYPES = {
    "dense": lambda k: ".dense2." in k or k.startswith("out."),
    "silu": lambda k: ".dense1." in k,
    "batch_norm": lambda k: ".bn." in k,
    "time_embedding": lambda k: k.endswith(".time.W"),
    "skip_add": lambda k: k.startswith("down") and not k.startswith("down3"),
}


def perturbed_params(plan, seed, scale=0.3):
    params = init_params(plan, seed)
    g = np.random.default_rng(seed + 1)
    for k in params.weights:
        params.weights[k] = params.weights[k] + scale * g.standard_normal(params.weights[k].shape)
    return params


def loss_fn(params, plan, t, x, R, mode="train"):
    return float((forward(params, plan, t, x, mode=mode) * R).sum())


def gradient_check(layer, n_checks=50, step=1e-4, mode="train", seed=0):
    """Largest relative error between analytic and central-difference gradients
    on ``n_checks`` random entries of the given layer type."""
    plan = NetworkPlan.for_bases(2)
    params = perturbed_params(plan, seed)
    g = np.random.default_rng(seed + 2)
    B = 9
    x, t, R = g.standard_normal((B, plan.io_dim)), g.uniform(0, 1, B), g.standard_normal((B, plan.io_dim))
    cache = {}
    forward(params.copy(), plan, t, x, mode=mode, cache=cache)
    grads = backward(params, plan, cache, R)
    entries = [(k, idx) for k in params.weights if LAYER_TYPES[layer](k)
               for idx in np.ndindex(params.weights[k].shape)]
    pick = g.choice(len(entries), size=min(n_checks, len(entries)), replace=False)
    scale = max(np.max(np.abs(v)) for v in grads.values())
    worst = 0.0
    for j in pick:
        k, idx = entries[j]
        w = params.weights[k]
        old = w[idx]
        w[idx] = old + step
        up = loss_fn(params.copy(), plan, t, x, R, mode)
        w[idx] = old - step
        down = loss_fn(params.copy(), plan, t, x, R, mode)
        w[idx] = old
        fd = (up - down) / (2 * step)
        # exact zeros (e.g. biases cancelled by batch norm) are compared on the gradient scale
        denom = max(abs(fd), abs(grads[k][idx]), 1e-6 * scale)
        worst = max(worst, abs(fd - grads[k][idx]) / denom)
    return worst


# -- plans ----------------------------------------------------------------------

@pytest.mark.parametrize("N", [8, 16, 32])
def test_table_plans(N):
    plan = NetworkPlan.for_bases(N)
    assert plan.io_dim == 4 * N and plan.time_embed_dim == 4 * N
    assert plan.down_dims == (8 * N, 4 * N, 2 * N, N)
    assert plan.up_dims == plan.down_dims[::-1]


def test_plan_validation():
    with pytest.raises(PlanError):
        NetworkPlan(4, 3, (8, 4), (4, 8))
    with pytest.raises(PlanError):
        NetworkPlan(4, 4, (8, 4), (8, 4))
    assert NetworkPlan.from_dict(NetworkPlan.for_bases(3).to_dict()) == NetworkPlan.for_bases(3)


# -- embedding -----------------------------------------------------------------

def test_embedding_at_zero():
    np.testing.assert_array_equal(sinusoidal_embed(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_embedding_formula():
    t, dim = 0.37, 6
    expected = []
    for i in range(dim // 2):
        expected += [np.sin(t / 10000 ** (2 * i / dim)), np.cos(t / 10000 ** (2 * i / dim))]
    np.testing.assert_allclose(sinusoidal_embed(t, dim), expected, rtol=1e-15)


def test_embedding_odd_dim():
    with pytest.raises(PlanError):
        sinusoidal_embed(0.5, 7)


def test_embedding_injective_on_grid():
    E = sinusoidal_embed(np.linspace(0, 1, 1000), 32)
    d = np.linalg.norm(E[:, None] - E[None], axis=-1)
    assert np.min(d[~np.eye(1000, dtype=bool)]) > 0


# -- init and forward ----------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_untrained_outputs_zero(seed, t):
    plan = NetworkPlan.for_bases(3)
    x = np.random.default_rng(seed).standard_normal((4, plan.io_dim)) * 10
    assert np.all(forward(init_params(plan, seed), plan, t, x) == 0)


def test_same_seed_same_init():
    plan = NetworkPlan.for_bases(2)
    a, b = init_params(plan, 5), init_params(plan, 5)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_preactivation_variance():
    plan = NetworkPlan.for_io_dim(256)
    W = init_params(plan, 0).weights["down0.dense1.W"]
    z = np.random.default_rng(1).standard_normal((1000, 256)) @ W
    assert 0.5 <= z.var() <= 2.0


def test_forward_shapes_and_determinism():
    plan = NetworkPlan.for_bases(2)
    params = perturbed_params(plan, 3)
    x = np.random.default_rng(0).standard_normal((6, plan.io_dim))
    out = forward(params, plan, 0.4, x)
    assert out.shape == x.shape
    assert np.array_equal(out, forward(params, plan, 0.4, x))
    assert forward(params, plan, 0.4, x[0]).shape == (plan.io_dim,)
    np.testing.assert_allclose(forward(params, plan, 0.4, x[0]), out[0], rtol=1e-13)


def test_train_mode_updates_running_stats():
    plan = NetworkPlan.for_bases(1)
    params = perturbed_params(plan, 0)
    before = params.stats["down0.bn.mean"].copy()
    x = np.random.default_rng(0).standard_normal((16, plan.io_dim)) + 3
    forward(params, plan, 0.5, x, mode="train")
    assert not np.array_equal(before, params.stats["down0.bn.mean"])
    snapshot = {k: v.copy() for k, v in params.stats.items()}
    forward(params, plan, 0.5, x, mode="eval")
    assert all(np.array_equal(snapshot[k], params.stats[k]) for k in snapshot)


def test_running_stats_momentum():
    plan = NetworkPlan(4, 4, (4,), (4,))
    params = perturbed_params(plan, 0)
    W = params.weights
    x = np.random.default_rng(1).standard_normal((32, 4))
    forward(params, plan, 0.25, x, mode="train")

    def silu(z):
        return z / (1 + np.exp(-z))

    a2 = silu(silu(x @ W["down0.dense1.W"] + W["down0.dense1.b"]) @ W["down0.dense2.W"] + W["down0.dense2.b"])
    u = a2 + sinusoidal_embed(0.25, 4) @ W["down0.time.W"] + W["down0.time.b"]
    np.testing.assert_allclose(params.stats["down0.bn.mean"], 0.1 * u.mean(0), rtol=1e-12)
    np.testing.assert_allclose(params.stats["down0.bn.var"], 0.9 + 0.1 * u.var(0), rtol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_named():
    plan = NetworkPlan.for_bases(1)
    params = init_params(plan, 0)
    params.weights["up1.dense1.W"][:] = np.inf
    with pytest.raises(NonFiniteActivationError, match="up1"):
        forward(params, plan, 0.5, np.ones((2, plan.io_dim)))


def test_wrong_width_rejected():
    plan = NetworkPlan.for_bases(2)
    with pytest.raises(PlanError):
        forward(init_params(plan, 0), plan, 0.1, np.ones(7))


# -- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("layer", sorted(LAYER_TYPES))
def test_gradient_matches_central_differences(layer):
    assert gradient_check(layer) <= 1e-4


@pytest.mark.parametrize("layer", ["dense", "batch_norm"])
def test_gradient_eval_mode(layer):
    assert gradient_check(layer, n_checks=20, mode="eval") <= 1e-4


def test_zero_upstream_gives_zero_gradients():
    plan = NetworkPlan.for_bases(2)
    params = perturbed_params(plan, 1)
    cache = {}
    x = np.random.default_rng(0).standard_normal((5, plan.io_dim))
    forward(params, plan, 0.2, x, mode="train", cache=cache)
    grads = backward(params, plan, cache, np.zeros_like(x))
    assert all(np.all(g == 0) for g in grads.values())


def test_gradients_add_over_disjoint_batches():
    plan = NetworkPlan.for_bases(2)
    params = perturbed_params(plan, 2)
    g = np.random.default_rng(3)
    xa, xb = g.standard_normal((4, 8)), g.standard_normal((3, 8))
    Ra, Rb = g.standard_normal((4, 8)), g.standard_normal((3, 8))
    ta, tb = g.uniform(size=4), g.uniform(size=3)

    def grads_of(t, x, R):
        cache = {}
        forward(params, plan, t, x, mode="eval", cache=cache)
        return backward(params, plan, cache, R)

    joint = grads_of(np.concatenate([ta, tb]), np.vstack([xa, xb]), np.vstack([Ra, Rb]))
    ga, gb = grads_of(ta, xa, Ra), grads_of(tb, xb, Rb)
    for k in joint:
        np.testing.assert_allclose(joint[k], ga[k] + gb[k], rtol=1e-10, atol=1e-12)


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    plan = NetworkPlan.for_bases(2, horizon=2.0)
    params = perturbed_params(plan, 4)
    params.stats["up0.bn.var"] += 0.5
    adam = {"m": {k: v * 0.1 for k, v in params.weights.items()},
            "v": {k: v ** 2 for k, v in params.weights.items()}, "t": 17}
    path = save_checkpoint(tmp_path / "ck.npz", plan, params, step=17, adam=adam)
    ck = load_checkpoint(path, expect_plan=plan)
    assert ck.plan == plan and ck.step == 17 and ck.adam["t"] == 17
    for k in params.weights:
        assert np.array_equal(ck.params.weights[k], params.weights[k])
        assert np.array_equal(ck.adam["v"][k], adam["v"][k])
    for k in params.stats:
        assert np.array_equal(ck.params.stats[k], params.stats[k])
    x = np.random.default_rng(0).standard_normal((3, 8))
    assert np.array_equal(forward(ck.params, plan, 0.3, x), forward(params, plan, 0.3, x))


def test_checkpoint_layout(tmp_path):
    plan = NetworkPlan.for_bases(1)
    params = perturbed_params(plan, 0)
    save_checkpoint(tmp_path / "ck.npz", plan, params)
    with np.load(tmp_path / "ck.npz") as z:
        assert z["weights"].dtype == np.dtype("<f8")
        assert np.array_equal(z["weights"], flatten(params.weights))
        assert int(z["version"]) == 1


def test_checkpoint_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck.npz", NetworkPlan.for_bases(2), init_params(NetworkPlan.for_bases(2), 0))
    with pytest.raises(IncompatibleModelError):
        load_checkpoint(tmp_path / "ck.npz", expect_plan=NetworkPlan.for_bases(3))
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(IncompatibleModelError):
        load_checkpoint(tmp_path / "junk.npz")


def test_check_params_rejects_wrong_shapes():
    plan = NetworkPlan.for_bases(2)
    params = init_params(plan, 0)
    check_params(params, plan)
    params.weights["out.b"] = np.zeros(3)
    with pytest.raises(IncompatibleModelError):
        check_params(params, plan)
