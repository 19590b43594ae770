import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fceyolo.fce import (
    FCE_KINDS, GCT, GCTConfig, GE, GEConfig, SE, SEConfig,
    fce_param_count, gc_forward, ge_forward, gct_forward, make_fce, se_forward,
)
from fceyolo.gradcheck import gradient_cases, run_case
from fceyolo.tensor import Tensor, default_dtype


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _x(rng, *shape):
    return Tensor(rng.normal(size=shape).astype(np.float64))


def _f64(block):
    return block.to(np.float64)


# ------------------------------------------------------------------ SE


def test_se_zero_weights_halves_input():
    blk = make_fce("SE", 8)
    for p in blk.parameters():
        p.data[:] = 0
    x = _x(np.random.default_rng(0), 2, 8, 4, 4)
    np.testing.assert_allclose(se_forward(x, blk).data, 0.5 * x.data, rtol=1e-6)


def test_se_zero_input():
    blk = make_fce("SE", 8, rng=np.random.default_rng(3))
    y = blk(Tensor(np.zeros((1, 8, 3, 3), np.float32)))
    assert np.all(y.data == 0)


def test_se_matches_straight_line_oracle():
    rng = np.random.default_rng(1)
    blk = _f64(make_fce("SE", 32, rng=rng))
    x = rng.normal(size=(2, 32, 5, 7))
    z = x.mean(axis=(2, 3))
    w1, b1 = blk.w1.data[:, :, 0, 0], blk.b1.data
    w2, b2 = blk.w2.data[:, :, 0, 0], blk.b2.data
    s = _sigmoid(np.maximum(z @ w1.T + b1, 0) @ w2.T + b2)
    np.testing.assert_allclose(blk(Tensor(x)).data, x * s[:, :, None, None], rtol=1e-10, atol=1e-12)


def test_se_without_bias():
    blk = make_fce("SE", 32, bias=False)
    assert blk.b1 is None and blk.num_params() == fce_param_count("SE", 32, blk.cfg) == 2 * 32 * 2


# ------------------------------------------------------------------ GC


def test_gc_single_position_zero_transform_is_identity():
    blk = make_fce("GC", 16, rng=np.random.default_rng(0))
    x = _x(np.random.default_rng(1), 2, 16, 1, 1)
    a = blk.attention(x)
    np.testing.assert_array_equal(a.data, np.ones((2, 1, 1, 1)))
    np.testing.assert_array_equal(gc_forward(x, blk).data, x.data)


def test_gc_zero_key_gives_uniform_attention():
    blk = make_fce("GC", 8)
    blk.wk.data[:] = 0
    x = _x(np.random.default_rng(2), 1, 8, 3, 5)
    np.testing.assert_allclose(blk.attention(x).data, np.full((1, 1, 3, 5), 1 / 15))
    np.testing.assert_allclose(blk.context(x).data, x.data.mean(axis=(2, 3), keepdims=True), atol=1e-12)


def test_gc_matches_brute_force_loops():
    rng = np.random.default_rng(4)
    blk = _f64(make_fce("GC", 4, rng=rng, ratio=2))
    blk.wv2.data = rng.normal(size=blk.wv2.shape)
    blk.bv2.data = rng.normal(size=blk.bv2.shape)
    x = rng.normal(size=(1, 4, 3, 3))
    wk = blk.wk.data[0, :, 0, 0]
    logits = [sum(wk[c] * x[0, c, i, j] for c in range(4)) for i in range(3) for j in range(3)]
    m = max(logits)
    e = [math.exp(l - m) for l in logits]
    alpha = [v / sum(e) for v in e]
    ctx = [sum(alpha[i * 3 + j] * x[0, c, i, j] for i in range(3) for j in range(3)) for c in range(4)]
    h = blk.wv1.data[:, :, 0, 0] @ np.array(ctx) + blk.bv1.data
    h = (h - h.mean()) / math.sqrt(h.var() + blk.cfg.eps) * blk.ln_gamma.data + blk.ln_beta.data
    t = blk.wv2.data[:, :, 0, 0] @ np.maximum(h, 0) + blk.bv2.data
    np.testing.assert_allclose(blk.attention(Tensor(x)).data.ravel(), alpha, rtol=1e-12)
    np.testing.assert_allclose(blk(Tensor(x)).data, x + t[None, :, None, None], rtol=1e-10)


def test_gc_residual_exact_when_transform_zero():
    blk = make_fce("GC", 32, rng=np.random.default_rng(9))  # last conv zero-initialized
    x = _x(np.random.default_rng(0), 2, 32, 6, 6)
    np.testing.assert_array_equal(blk(x).data, x.data)


# ------------------------------------------------------------------ GE


def test_ge_zero_input():
    blk = make_fce("GE", 4)
    x = Tensor(np.zeros((1, 4, 4, 4)))
    np.testing.assert_array_equal(blk.gate(x).data, 0.5)
    assert np.all(ge_forward(x, blk).data == 0)


def test_ge_constant_channel():
    blk = make_fce("GE", 3)
    vals = np.array([-2.0, 0.3, 5.0])
    x = np.broadcast_to(vals[None, :, None, None], (1, 3, 4, 4)).copy()
    y = blk(Tensor(x)).data
    np.testing.assert_allclose(y, (vals * _sigmoid(vals))[None, :, None, None] * np.ones((1, 3, 4, 4)))


def test_ge_extent_matches_brute_force_blocks():
    x = np.random.default_rng(5).normal(size=(1, 1, 4, 4))
    blk = GE(GEConfig(1, extent=2))
    want = np.empty_like(x)
    for bi in range(2):
        for bj in range(2):
            block = x[0, 0, 2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2]
            want[0, 0, 2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2] = block * _sigmoid(block.mean())
    np.testing.assert_allclose(blk(Tensor(x)).data, want, rtol=1e-12)


def test_ge_extent_ragged_edges_use_partial_blocks():
    x = np.random.default_rng(6).normal(size=(1, 2, 5, 5))
    y = GE(GEConfig(2, extent=2))(Tensor(x)).data
    corner = x[:, :, 4:, 4:]
    np.testing.assert_allclose(y[:, :, 4:, 4:], corner * _sigmoid(corner))


def test_ge_large_extent_is_global():
    x = _x(np.random.default_rng(7), 1, 3, 4, 4)
    np.testing.assert_allclose(GE(GEConfig(3, extent=9))(x).data, GE(GEConfig(3))(x).data)


def test_ge_rejects_parameterized_and_bad_extent():
    with pytest.raises(ValueError):
        GE(GEConfig(4, parameter_free=False))
    with pytest.raises(ValueError):
        GE(GEConfig(4, extent=0))


# ------------------------------------------------------------------ GCT


def test_gct_equal_means_identity():
    x = np.random.default_rng(8).normal(size=(2, 6, 4, 4))
    x -= x.mean(axis=(2, 3), keepdims=True) - 0.7
    blk = make_fce("GCT", 6)
    np.testing.assert_allclose(blk.gate(Tensor(x)).data, 1.0)
    np.testing.assert_allclose(gct_forward(Tensor(x), blk).data, x)


def test_gct_zero_input():
    blk = make_fce("GCT", 4)
    x = Tensor(np.zeros((1, 4, 3, 3)))
    np.testing.assert_array_equal(blk.gate(x).data, 1.0)
    assert np.all(blk(x).data == 0)


def test_gct_two_channel_hand_value():
    m = 3.0
    x = np.stack([np.full((4, 4), m), np.full((4, 4), -m)])[None]
    blk = GCT(GCTConfig(2, eps=0.0))
    a = blk.gate(Tensor(x)).data.ravel()
    np.testing.assert_allclose(a, [math.exp(-1 / 8)] * 2, rtol=1e-12)
    np.testing.assert_allclose(a, 0.882497, atol=1e-6)


def test_gct_rejects_nonpositive_width():
    with pytest.raises(ValueError):
        GCT(GCTConfig(4, c=0.0))


# ------------------------------------------------------------------ shared


@pytest.mark.parametrize("kind", FCE_KINDS)
def test_channel_mismatch_raises(kind):
    blk = make_fce(kind, 8)
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 4, 3, 3), np.float32)))


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_fce("CBAM", 8)
    with pytest.raises(ValueError):
        fce_param_count("CBAM", 8)


@pytest.mark.parametrize("kind", FCE_KINDS)
def test_shape_preserved(kind):
    x = _x(np.random.default_rng(0), 2, 16, 5, 3)
    assert make_fce(kind, 16, rng=np.random.default_rng(1))(x).shape == (2, 16, 5, 3)


def test_param_count_examples():
    assert fce_param_count("SE", 512) == 512 * 32 + 32 + 32 * 512 + 512 == 33_312
    assert fce_param_count("GCT", 512) == 0
    assert fce_param_count("GE", 77) == 0


@pytest.mark.parametrize("kind", FCE_KINDS)
@pytest.mark.parametrize("c", [16, 64, 512])
def test_param_count_matches_allocation(kind, c):
    blk = make_fce(kind, c)
    assert blk.num_params() == fce_param_count(kind, c, blk.cfg)


def _gated_kind_cases():
    return st.sampled_from(["SE", "GE", "GCT", "GE2"])


def _block(kind, c):
    if kind == "GE2":
        return GE(GEConfig(c, extent=2))
    return make_fce(kind, c, rng=np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(kind=_gated_kind_cases(),
       x=arrays(np.float64, (2, 4, 3, 4), elements=st.floats(-50, 50, allow_nan=False)))
def test_gating_bound(kind, x):
    with default_dtype(np.float64):
        blk = _f64(_block(kind, 4))
        y = blk(Tensor(x)).data
    assert np.all(np.abs(y) <= np.abs(x) + 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["SE", "GE", "GCT"]))
def test_gate_spatial_permutation_equivariance(seed, kind):
    rng = np.random.default_rng(seed)
    blk = _f64(_block(kind, 6))
    x = rng.normal(size=(2, 6, 4, 5))
    perm = rng.permutation(20)
    xp = x.reshape(2, 6, 20)[:, :, perm].reshape(2, 6, 4, 5)
    np.testing.assert_allclose(blk.gate(Tensor(xp)).data, blk.gate(Tensor(x)).data, rtol=1e-12)
    y = blk(Tensor(x)).data.reshape(2, 6, 20)[:, :, perm].reshape(2, 6, 4, 5)
    np.testing.assert_allclose(blk(Tensor(xp)).data, y, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gct_gate_range(seed):
    x = np.random.default_rng(seed).normal(size=(3, 8, 2, 2)) * 10
    a = make_fce("GCT", 8).gate(Tensor(x)).data
    assert np.all((a > 0) & (a <= 1))


def test_se_gate_range():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 16, 3, 3)) * 5)
    g = _f64(make_fce("SE", 16)).gate(x).data
    assert np.all((g > 0) & (g < 1))


@pytest.mark.parametrize("name", sorted(gradient_cases("fce")))
def test_fce_gradients(name):
    assert run_case(name, 0) < 1e-4
