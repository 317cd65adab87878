import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixer_dsr import diffengine as de
from mixer_dsr.backbones import BACKBONE_KINDS, eval_field, init_backbone

from helpers import central_diff, rel_err


def plain_mlp(weights, biases, z):
    """Reference swish MLP in raw numpy."""
    h = z
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = h / (1.0 + np.exp(-h))
    return h


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_same_seed_is_bitwise_identical(kind):
    a = init_backbone(kind, 2, 3, seed=11)
    b = init_backbone(kind, 2, 3, seed=11)
    c = init_backbone(kind, 2, 3, seed=12)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.arrays(), c.arrays()))


def test_lora_zero_context_is_plain_mlp():
    bb = init_backbone("lora", 2, 4, seed=0)
    z = np.random.default_rng(1).standard_normal((10, 2))
    out = eval_field(bb, np.zeros(4), z).data
    ref = plain_mlp([w.data for w in bb.root.weights], [b.data for b in bb.root.biases], z)
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-14)
    for w, eff in zip(bb.root.weights, bb.effective_weights(np.zeros(4))):
        assert np.array_equal(w.data, eff)


def test_lora_effective_weights_reproduce_forward():
    bb = init_backbone("lora", 2, 3, seed=4)
    xi = np.array([0.3, -1.2, 0.7])
    z = np.random.default_rng(2).standard_normal((6, 2))
    ref = plain_mlp(bb.effective_weights(xi), [b.data for b in bb.root.biases], z)
    np.testing.assert_allclose(eval_field(bb, xi, z).data, ref, rtol=1e-12, atol=1e-13)


def test_lora_update_rank_is_bounded_by_context_dim():
    bb = init_backbone("lora", 2, 2, seed=0)
    xi = np.array([0.5, -0.4])
    for w, eff in zip(bb.root.weights, bb.effective_weights(xi)):
        assert np.linalg.matrix_rank(eff - w.data) <= 2


def test_hypernet_zero_hyper_weights_ignore_context():
    bb = init_backbone("hypernet", 2, 3, seed=0)
    for hw in bb.hyper_w:
        hw.data[:] = 0.0
    z = np.random.default_rng(0).standard_normal((5, 2))
    xi = de.parameter(np.array([0.4, -2.0, 1.0]))
    out = eval_field(bb, xi, de.constant(z))
    (g,) = de.grad(de.sum(out), [xi])
    assert np.all(g == 0.0)
    other = eval_field(bb, np.array([9.0, 1.0, -3.0]), z).data
    np.testing.assert_array_equal(out.data, other)


def test_hypernet_generated_weights_reproduce_forward():
    bb = init_backbone("hypernet", 2, 3, seed=5)
    xi = np.array([0.2, -0.5, 1.1])
    z = np.random.default_rng(3).standard_normal((4, 2))
    ws, bs = zip(*bb.generate_weights(xi))
    np.testing.assert_allclose(eval_field(bb, xi, z).data, plain_mlp(ws, bs, z), rtol=1e-12, atol=1e-13)


def test_hypernet_flattened_layout_is_affine():
    bb = init_backbone("hypernet", 2, 3, seed=5, width=8)
    xi = np.array([0.2, -0.5, 1.1])
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in bb.generate_weights(xi)])
    np.testing.assert_allclose(flat, bb.hyper_bias_vector() + bb.hyper_weights_matrix() @ xi, rtol=1e-13, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**16))
def test_hypernet_linearity(a, b, seed):
    bb = init_backbone("hypernet", 2, 2, seed=1, width=8)
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal(2), rng.standard_normal(2)
    base = [(w.data, bias.data) for w, bias in zip(bb.base.weights, bb.base.biases)]
    lhs = bb.generate_weights(a * x1 + b * x2)
    t1, t2 = bb.generate_weights(x1), bb.generate_weights(x2)
    for (lw, lb), (w1, b1), (w2, b2), (w0, b0) in zip(lhs, t1, t2, base):
        np.testing.assert_allclose(lw, a * w1 + b * w2 - (a + b - 1) * w0, atol=1e-11)
        np.testing.assert_allclose(lb, a * b1 + b * b2 - (a + b - 1) * b0, atol=1e-11)


def test_concat_field_equals_literal_concatenation():
    bb = init_backbone("concat", 2, 3, seed=2)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((7, 2))
    xi = rng.standard_normal(3)
    lit = bb.forward_concat(de.constant(z), de.constant(np.tile(xi, (7, 1)))).data
    np.testing.assert_allclose(eval_field(bb, xi, z).data, lit, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_context_gradient_matches_finite_differences(kind):
    bb = init_backbone(kind, 2, 3, seed=3, width=16)
    rng = np.random.default_rng(7)
    z = rng.standard_normal((4, 2))
    xi0 = 0.5 * rng.standard_normal(3)
    wts = rng.standard_normal((4, 2))

    def f(arrs):
        return float(np.sum(eval_field(bb, arrs[0], z).data * wts))

    xi = de.parameter(xi0.copy())
    (g,) = de.grad(de.sum(de.mul(eval_field(bb, xi, z), de.constant(wts))), [xi])
    assert rel_err(g, central_diff(f, [xi0])[0]) < 1e-4


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_parameter_and_state_gradients_match_finite_differences(kind):
    bb = init_backbone(kind, 2, 2, seed=3, width=8)
    rng = np.random.default_rng(8)
    z0 = rng.standard_normal((3, 2))
    xi = 0.3 * rng.standard_normal(2)
    params = bb.parameters()
    zv = de.parameter(z0.copy())
    (gz, *gp) = de.grad(de.sum(de.square(eval_field(bb, xi, zv))), [zv, *params])

    def f_z(arrs):
        return float(np.sum(eval_field(bb, xi, arrs[0]).data ** 2))

    assert rel_err(gz, central_diff(f_z, [z0])[0]) < 1e-4
    for p, g in zip(params, gp):
        orig = p.data.copy()

        def f_p(arrs, p=p):
            p.data = arrs[0]
            return float(np.sum(eval_field(bb, xi, z0).data ** 2))

        fd = central_diff(f_p, [orig])[0]
        p.data = orig
        assert rel_err(g, fd) < 1e-4


def test_default_concat_param_count_matches_hand_formula():
    bb = init_backbone("concat", 2, 4, seed=0)
    layers = [(2, 32), (4, 32), (64, 64), (64, 64), (64, 2)]
    assert bb.param_count() == sum(i * o + o for i, o in layers)


def test_lora_and_hypernet_param_counts():
    mlp = [(2, 64), (64, 64), (64, 2)]
    d = 3
    lora = init_backbone("lora", 2, d, seed=0)
    assert lora.param_count() == sum(i * o + o + d * o + i * d for i, o in mlp)
    hyper = init_backbone("hypernet", 2, d, seed=0)
    assert hyper.param_count() == sum((i * o + o) * (1 + d) for i, o in mlp)
    assert lora.param_count() == sum(a.size for a in lora.arrays())


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_context_dimension_mismatch_raises(kind):
    bb = init_backbone(kind, 2, 3, seed=0)
    with pytest.raises(de.ShapeError):
        eval_field(bb, np.zeros(4), np.zeros((1, 2)))


def test_invalid_init_arguments():
    with pytest.raises(ValueError):
        init_backbone("siren", 2, 2, seed=0)
    with pytest.raises(ValueError):
        init_backbone("lora", 0, 2, seed=0)


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_load_arrays_round_trip_is_exact(kind):
    a = init_backbone(kind, 2, 2, seed=0)
    b = init_backbone(kind, 2, 2, seed=9)
    b.load_arrays(a.arrays())
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    with pytest.raises(ValueError):
        b.load_arrays(a.arrays()[:-1])
