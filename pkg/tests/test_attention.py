import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnseg import attention
from attnseg.attention import (
    AttentionBlock,
    ChannelAttentionParams,
    SpatialAttentionParams,
    apply_attention,
    cbam_refine,
    channel_attention,
    init_channel_params,
    init_spatial_params,
    param_count,
    spatial_attention,
    zero_block,
)
from attnseg.tensor import ContractError, Tensor, finite_diff_check


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_block(c, seed):
    rng = np.random.default_rng(seed)
    return AttentionBlock(init_channel_params(c, rng), init_spatial_params(rng))


# channel gate ----------------------------------------------------------------


def test_channel_zero_input_gives_half():
    w = channel_attention(np.zeros((2, 16, 4, 4)), random_block(16, 0).channel)
    assert w.shape == (2, 16, 1, 1)
    np.testing.assert_array_equal(w.data, 0.5)


def test_channel_zero_mlp_gives_half():
    F = np.random.default_rng(1).normal(size=(1, 8, 3, 3))
    np.testing.assert_array_equal(channel_attention(F, zero_block(8).channel).data, 0.5)


def test_channel_hand_example():
    # channel 0 constant 1 -> (avg, max) = (1, 1); channel 1 zero -> (0, 0)
    F = np.stack([np.ones((2, 2)), np.zeros((2, 2))])[None]
    p = ChannelAttentionParams(Tensor([[1.0], [1.0]]), Tensor([[1.0, 0.0]]))
    # scalar evaluation of both MLP branches
    avg, mx = [1.0, 0.0], [1.0, 0.0]
    pre = [0.0, 0.0]
    for v in (avg, mx):
        hidden = max(0.0, v[0] * 1.0 + v[1] * 1.0)
        pre[0] += hidden * 1.0
        pre[1] += hidden * 0.0
    assert pre == [2.0, 0.0]
    np.testing.assert_allclose(channel_attention(F, p).data.ravel(), [sig(2.0), 0.5], rtol=1e-6)


def test_channel_mismatch():
    with pytest.raises(ContractError):
        channel_attention(np.zeros((1, 4, 2, 2)), init_channel_params(8, np.random.default_rng(0)))


# spatial gate ----------------------------------------------------------------


def test_spatial_zero_kernel_gives_half():
    F = np.random.default_rng(2).normal(size=(2, 5, 6, 7))
    w = spatial_attention(F, zero_block(8).spatial)
    assert w.shape == (2, 1, 6, 7)
    np.testing.assert_array_equal(w.data, 0.5)


def test_spatial_single_pixel_uses_centre_taps():
    k = np.random.default_rng(3).normal(size=(1, 2, 7, 7))
    F = np.array([2.0, 4.0]).reshape(1, 2, 1, 1)
    expected = sig(3.0 * k[0, 0, 3, 3] + 4.0 * k[0, 1, 3, 3])
    got = spatial_attention(F, SpatialAttentionParams(Tensor(k))).data.item()
    assert abs(got - expected) < 1e-6


def test_spatial_brute_force():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(1, 3, 5, 4))
    k = rng.normal(size=(1, 2, 7, 7))
    desc = np.stack([F[0].mean(axis=0), F[0].max(axis=0)])
    padded = np.pad(desc, ((0, 0), (3, 3), (3, 3)))
    expected = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            expected[i, j] = sig((padded[:, i : i + 7, j : j + 7] * k[0]).sum())
    got = spatial_attention(F, SpatialAttentionParams(Tensor(k))).data[0, 0]
    np.testing.assert_allclose(got, expected, rtol=1e-5)


def test_spatial_channel_permutation():
    rng = np.random.default_rng(5)
    F = rng.normal(size=(1, 6, 4, 4))
    p = init_spatial_params(rng)
    perm = rng.permutation(6)
    np.testing.assert_array_equal(spatial_attention(F, p).data, spatial_attention(F[:, perm], p).data)


# apply / cascade -------------------------------------------------------------


def test_apply_identity_and_half():
    F = Tensor(np.random.default_rng(6).normal(size=(1, 2, 3, 3)))
    np.testing.assert_array_equal(apply_attention(F, Tensor(np.ones((1, 2, 1, 1)))).data, F.data)
    np.testing.assert_array_equal(apply_attention(F, Tensor(np.full((1, 1, 3, 3), 0.5))).data, F.data / 2)


def test_apply_hand_example():
    F = Tensor(np.array([1.0, -2.0]).reshape(1, 2, 1, 1))
    out = apply_attention(F, Tensor(np.array([0.25, 0.75]).reshape(1, 2, 1, 1)))
    np.testing.assert_array_equal(out.data.ravel(), [0.25, -1.5])


def test_apply_rejects_bad_broadcast():
    F = Tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ContractError):
        apply_attention(F, Tensor(np.ones((1, 2, 3, 1))))


def test_cascade_with_unit_gates_is_identity(monkeypatch):
    monkeypatch.setattr(attention, "channel_attention", lambda F, p: Tensor(np.ones((F.shape[0], F.shape[1], 1, 1))))
    monkeypatch.setattr(attention, "spatial_attention", lambda F, p: Tensor(np.ones((F.shape[0], 1) + F.shape[2:])))
    F = Tensor(np.random.default_rng(7).normal(size=(2, 8, 4, 4)))
    np.testing.assert_array_equal(cbam_refine(F, random_block(8, 0)).data, F.data)


def test_cascade_zero_block_quarters():
    F = Tensor(np.random.default_rng(8).normal(size=(2, 8, 4, 4)))
    np.testing.assert_array_equal(cbam_refine(F, zero_block(8)).data, F.data / 4)


def test_cascade_matches_manual_composition():
    rng = np.random.default_rng(9)
    F = Tensor(rng.normal(size=(2, 16, 5, 5)))
    block = random_block(16, 10)
    step1 = F.data * channel_attention(F, block.channel).data
    step2 = step1 * spatial_attention(Tensor(step1), block.spatial).data
    np.testing.assert_allclose(cbam_refine(F, block).data, step2, rtol=1e-6)


def test_ablated_blocks():
    F = Tensor(np.random.default_rng(11).normal(size=(1, 8, 4, 4)))
    block = random_block(8, 12)
    only_c = cbam_refine(F, AttentionBlock(block.channel, None)).data
    np.testing.assert_allclose(only_c, F.data * channel_attention(F, block.channel).data, rtol=1e-6)
    only_s = cbam_refine(F, AttentionBlock(None, block.spatial)).data
    np.testing.assert_allclose(only_s, F.data * spatial_attention(F, block.spatial).data, rtol=1e-6)


# parameters ------------------------------------------------------------------


@pytest.mark.parametrize("c, expected", [(512, 65536), (64, 1024), (8, 16)])
def test_param_count(c, expected):
    assert param_count(random_block(c, 0)) == (expected, 98)


@given(st.integers(1, 64))
def test_param_identity_for_multiples_of_eight(m):
    c = 8 * m
    assert param_count(zero_block(c)) == (c * c // 4, 98)


def test_hidden_width_floor_with_minimum():
    assert attention.hidden_width(4) == 1
    assert attention.hidden_width(20) == 2


# gradients -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_full_cascade(seed):
    rng = np.random.default_rng(seed)
    F = rng.uniform(-2, 2, (2, 16, 8, 8))
    block = random_block(16, seed + 100)
    proj = rng.normal(size=F.shape)
    err = finite_diff_check(lambda t: (cbam_refine(t, block) * proj).sum(), F, eps=1e-5)
    assert err < 1e-3


# properties ------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gate_properties(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(0, 3, size=(1, 8, 5, 5))
    block = random_block(8, seed)
    wc = channel_attention(F, block.channel).data
    ws = spatial_attention(F, block.spatial).data
    assert ((wc > 0) & (wc < 1)).all() and ((ws > 0) & (ws < 1)).all()
    flat = F.reshape(1, 8, 25)[:, :, rng.permutation(25)].reshape(F.shape)
    np.testing.assert_allclose(channel_attention(flat, block.channel).data, wc, rtol=1e-6)
    assert (np.abs(cbam_refine(Tensor(F), block).data) <= np.abs(F.astype(np.float32))).all()
