import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixer_dsr import diffengine as de
from mixer_dsr import trainer
from mixer_dsr.checkpoint import load_checkpoint, load_model, save_checkpoint
from mixer_dsr.container import ContainerError
from mixer_dsr.datagen import EnvData
from mixer_dsr.errors import ConfigError, TrainingAborted
from mixer_dsr.metrics import routing_purity
from mixer_dsr.trainer import (
    ModelSpec,
    TrainConfig,
    adapt,
    batch_by_context_l1,
    build_model,
    dataset_loss,
    proximal_loss,
    train,
)

T = np.linspace(0, 2, 21)


def decay_env(rate, seed, n=4):
    z0 = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    traj = z0[:, None, :] * np.exp(-rate * T)[None, :, None]
    return EnvData("train", T, traj, traj[::-1].copy())


def rotation_env(omega, seed, n=4):
    z0 = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    c, s = np.cos(omega * T), np.sin(omega * T)
    traj = np.stack([z0[:, :1] * c + z0[:, 1:] * s, -z0[:, :1] * s + z0[:, 1:] * c], axis=-1)
    return EnvData("train", T, traj, traj.copy())


def two_family_envs():
    return [decay_env(1.0, 0), rotation_env(2.0, 1), decay_env(1.2, 2), rotation_env(2.4, 3)]


FAMILIES = [0, 1, 0, 1]


def small_cfg(**kw):
    base = dict(outer_iters=3, inner_iters_theta=3, inner_iters_xi=3, gate_period=3, substeps=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def small_model(M=1, E=1, ctx=2, split=False, seed=0):
    return build_model("lora", 2, E, M, ctx, split, seed, width=16)


# ---- proximal loss -----------------------------------------------------------------


def test_proximal_loss_examples():
    assert proximal_loss(0.5, [np.array([0.5])], [np.array([0.0])], 1.0) == pytest.approx(0.75)
    assert proximal_loss(0.5, [np.array([3.0])], [np.array([0.0])], 0.0) == 0.5
    assert proximal_loss(0.5, [np.array([3.0])], [np.array([3.0])], 10.0) == 0.5
    p = de.parameter(np.array([0.3, -0.4]))
    v = proximal_loss(de.constant(0.5), [p], [np.zeros(2)], 1.0)
    assert float(v.data) == pytest.approx(0.75)
    (g,) = de.grad(v, [p])
    np.testing.assert_allclose(g, [0.6, -0.8])


# ---- batching ----------------------------------------------------------------------


def test_batch_full_size_is_everything():
    X = np.random.default_rng(0).standard_normal((6, 2))
    assert sorted(batch_by_context_l1(X, 6, 3).tolist()) == list(range(6))


def test_batch_nearest_neighbour_example():
    X = np.array([0.0, 0.1, 5.0, 5.1])
    assert trainer._neighbours(X[:, None], 1, 2).tolist() == [1, 0]
    assert trainer._neighbours(X[:, None], 2, 2).tolist() == [2, 3]
    # the documented example: the anchor whose nearest neighbour is env 2 (0-based)
    assert sorted(trainer._neighbours(X[:, None], 3, 2).tolist()) == [2, 3]


def test_batch_zero_contexts_takes_lowest_indices():
    X = np.zeros((6, 3))
    for seed in range(10):
        b = batch_by_context_l1(X, 3, seed)
        rest = [i for i in range(6) if i != b[0]][:2]
        assert b.tolist() == [b[0]] + rest


def test_batch_size_errors():
    with pytest.raises(ConfigError):
        batch_by_context_l1(np.zeros((3, 2)), 4, 0)
    with pytest.raises(ConfigError):
        batch_by_context_l1(np.zeros((3, 2)), 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**16), st.data())
def test_batch_is_anchor_plus_nearest(E, seed, data):
    bs = data.draw(st.integers(1, E))
    X = np.random.default_rng(seed).standard_normal((E, 2))
    b = batch_by_context_l1(X, bs, seed)
    assert len(set(b.tolist())) == bs
    dist = np.abs(X - X[b[0]]).sum(1)
    outside = np.setdiff1d(np.arange(E), b)
    if outside.size and bs > 1:
        assert dist[b[1:]].max() <= dist[outside].min()


# ---- config ------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(lr_theta=-1.0), dict(inner_iters_xi=0), dict(gate_mode="softmax"),
                                dict(batch_size=9), dict(prox=math.nan)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate(4)


def test_default_batch_size_is_envs_per_expert():
    assert TrainConfig().resolved_batch_size(10, 2) == 5
    assert TrainConfig().resolved_batch_size(10, 3) == 4
    assert TrainConfig().resolved_batch_size(3, 5) == 1


def test_model_builder_defaults():
    m = build_model("lora", 2, 5, 3, 6, split_contexts=True, seed=2)
    assert np.all(m.contexts.data == 0) and m.contexts.shape == (5, 6)
    a = [x.tobytes() for x in m.bank.experts[0].arrays()]
    assert all([x.tobytes() for x in e.arrays()] == a for e in m.bank.experts)
    with pytest.raises(ConfigError):
        build_model("lora", 2, 5, 4, 6, split_contexts=True)


# ---- training ----------------------------------------------------------------------


def test_linear_field_sanity():
    env = decay_env(1.0, 0)
    m = small_model()
    initial = dataset_loss(m, [env], substeps=1)
    res = train([env], m, small_cfg(outer_iters=10, inner_iters_theta=6, inner_iters_xi=6, gate_period=6))
    losses = [h["train_mse"] for h in res.history]
    assert losses[-1] < initial / 10
    assert res.best_model is not None and res.state.best_iter >= 0


def test_zero_learning_rates_keep_history_constant():
    env = decay_env(1.0, 0)
    res = train([env], small_model(), small_cfg(lr_theta=0.0, lr_xi=0.0))
    losses = [h["train_mse"] for h in res.history]
    assert len(set(losses)) == 1
    assert np.all(res.state.model.contexts.data == 0)


def test_training_is_bitwise_reproducible():
    envs = two_family_envs()
    runs = [train(envs, small_model(2, 4, 4, True), small_cfg()) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert runs[0].state.model.checksum() == runs[1].state.model.checksum()
    assert runs[0].state.model.contexts.data.tobytes() == runs[1].state.model.contexts.data.tobytes()


def test_resume_from_checkpoint_is_bitwise(tmp_path):
    envs = two_family_envs()
    spec = ModelSpec("lora", 2, 4, 2, 4, True, 0, 16)
    cfg = small_cfg(outer_iters=4)
    straight = train(envs, spec.build(), cfg)
    part = train(envs, spec.build(), cfg, stop_after=2)
    save_checkpoint(tmp_path / "c.ckpt", part.state, spec, {"note": "x"})
    state, spec2, extra = load_checkpoint(tmp_path / "c.ckpt")
    assert spec2 == spec and extra == {"note": "x"} and state.outer == 2
    resumed = train(envs, state=state)
    assert resumed.history == straight.history
    a, b = resumed.state.model.state_arrays(), straight.state.model.state_arrays()
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
    best, _ = load_model(tmp_path / "c.ckpt")
    assert best.checksum() == part.best_model.checksum()


def test_corrupt_checkpoint_is_reported(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"MXDR\x01\x00\x00\x00garbage")
    with pytest.raises(ContainerError):
        load_checkpoint(p)


def test_repeated_non_finite_losses_abort():
    env = decay_env(1.0, 0)
    m = small_model()
    m.bank.experts[0].root.biases[-1].data[:] = 1e300
    with pytest.raises(TrainingAborted, match="consecutive"):
        train([env], m, small_cfg(outer_iters=10))


def test_non_finite_batches_are_skipped_and_recorded():
    env = decay_env(1.0, 0)
    m = small_model()
    m.bank.experts[0].root.biases[-1].data[:] = 1e300
    seen = []
    with pytest.raises(TrainingAborted):
        train([env], m, small_cfg(outer_iters=10), on_outer=lambda s, r: seen.append(r))
    assert len(seen) == 3 and all(r["skipped"] == 6 for r in seen)


def test_top1_sparsity_and_block_isolation():
    envs = two_family_envs()
    m = small_model(2, 4, 4, True)
    m.bank.experts[1].load_arrays([a + 0.01 for a in m.bank.experts[1].arrays()])
    checks = {"theta": 0, "xi": 0}
    prev_ctx = {}

    def hook(ev):
        model = ev["model"]
        checks[ev["block"]] += 1
        if ev["block"] == "theta":
            for mm in range(model.n_experts):
                now = model.bank.experts[mm].arrays() + [model.bank.offsets.data[mm:mm + 1]]
                if mm not in ev["active"]:
                    assert ev["grad_norms"][mm] == 0.0
                    assert all(np.array_equal(x, y) for x, y in zip(now, ev["before"][mm]))
            assert set(ev["active"]) == set(ev["routes"].tolist())

    def ctx_snapshot(state, record):
        prev_ctx[record["iter"]] = state.model.contexts.data.copy()

    res = train(envs, m, small_cfg(outer_iters=3, gate_period=1), hook=hook, on_outer=ctx_snapshot)
    assert checks["theta"] == 9 and checks["xi"] == 9
    assert res.state.step == 18


def test_theta_block_leaves_contexts_and_xi_block_leaves_weights():
    envs = two_family_envs()
    state = trainer.TrainState.fresh(small_model(2, 4, 4, True), small_cfg())
    state.model.contexts.data = np.random.default_rng(0).standard_normal((4, 4)) * 0.1
    ctx = state.model.contexts.data.copy()
    trainer._run_block(state, envs, "theta", None)
    assert np.array_equal(state.model.contexts.data, ctx)
    theta = [a.copy() for a in state.model.theta_arrays()]
    trainer._run_block(state, envs, "xi", None)
    assert all(np.array_equal(x, y) for x, y in zip(theta, state.model.theta_arrays()))
    assert not np.array_equal(state.model.contexts.data, ctx)


def test_gradient_gate_with_identical_experts_collapses():
    envs = two_family_envs()
    res = train(envs, small_model(2, 4, 4, True), small_cfg(gate_mode="gradient", outer_iters=2))
    assert res.state.model.routing().tolist() == [0, 0, 0, 0]
    assert routing_purity(res.state.model.routing(), FAMILIES) == 0.5


# ---- adaptation --------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_pair():
    envs = two_family_envs()
    cfg = small_cfg(outer_iters=12, inner_iters_theta=4, inner_iters_xi=4, gate_period=4, lr_theta=1e-2)
    return envs, train(envs, small_model(2, 4, 2, False), cfg).state.model


def test_adapt_zero_steps_returns_zero_context(trained_pair):
    envs, model = trained_pair
    res = adapt(model, envs[:2], steps=0, substeps=1)
    assert np.all(res.contexts == 0) and res.frozen_ok


def test_adapt_changes_only_contexts(trained_pair):
    envs, model = trained_pair
    arrays = {k: v.copy() for k, v in model.state_arrays().items()}
    res = adapt(model, envs[:2], steps=5, substeps=1)
    assert res.frozen_ok and res.checksum_before == model.checksum()
    after = model.state_arrays()
    assert all(arrays[k].tobytes() == after[k].tobytes() for k in arrays)
    assert np.count_nonzero(res.contexts) == res.contexts.size == 2 * model.ctx_dim


def test_adapt_split_contexts_moves_only_routed_segment():
    envs = two_family_envs()[:2]
    model = small_model(2, 2, 4, True)
    m0 = int(model.gate.route(np.zeros((1, 4)))[0])
    res = adapt(model, envs, steps=1, substeps=1)
    seg = slice(2 * m0, 2 * m0 + 2)
    for row in res.contexts:
        assert np.count_nonzero(row) == 2 and np.all(row[seg] != 0)
