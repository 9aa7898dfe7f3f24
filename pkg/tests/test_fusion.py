"""Fusion blocks: identity-at-init, formula oracles, limit cases."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2fn import nn
from m2fn import tensor as T
from m2fn.fusion import (CbnBlock, HighFusionBlock, SpatialAttentionBlock,
                         cbn_forward, high_level_fuse, replicate_and_concat,
                         spatial_attention)
from m2fn.tensor import ShapeError, grad_check


def make_cbn(seed=0, channels=3, dim_aux=4, hidden=5, nonzero=False):
    block = CbnBlock(np.random.default_rng(seed), channels, dim_aux, hidden)
    if nonzero:
        rng = np.random.default_rng(seed + 100)
        block.scale_head.weight.data[:] = rng.uniform(-0.4, 0.4,
                                                      block.scale_head.weight.shape)
        block.shift_head.weight.data[:] = rng.uniform(-0.4, 0.4,
                                                      block.shift_head.weight.shape)
    return block


class TestCbn:
    def test_zero_init_equals_plain_batch_norm_bitexact(self):
        rng = np.random.default_rng(1)
        feats = rng.uniform(-2, 2, (4, 3, 2, 2))
        aux = rng.uniform(-1, 1, (4, 4))
        block = make_cbn()
        bn = nn.BatchNorm(3)
        # share the affine parameters and running state
        bn.gamma.data[:] = block.gamma.data
        bn.beta.data[:] = block.beta.data
        got = cbn_forward(block, T.tensor(feats), T.tensor(aux), mode="train")
        want = bn(T.tensor(feats), training=True)
        assert got.data.tobytes() == want.data.tobytes()
        np.testing.assert_array_equal(block.running.mean, bn.running.mean)
        got_e = cbn_forward(block, T.tensor(feats), T.tensor(aux), mode="eval")
        want_e = bn(T.tensor(feats), training=False)
        assert got_e.data.tobytes() == want_e.data.tobytes()

    def test_conditioning_differs_iff_delta_nonzero(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(-1, 1, (1, 3, 2, 2))
        feats = np.concatenate([img, img])
        aux = rng.uniform(-1, 1, (2, 4))
        zero = make_cbn()(T.tensor(feats), T.tensor(aux), training=True)
        assert np.array_equal(zero.data[0], zero.data[1])
        nonzero = make_cbn(nonzero=True)(T.tensor(feats), T.tensor(aux), training=True)
        assert not np.array_equal(nonzero.data[0], nonzero.data[1])

    def test_against_formula_oracle(self):
        rng = np.random.default_rng(3)
        feats = rng.uniform(-1, 1, (2, 4, 3, 3))
        aux = rng.uniform(-1, 1, (2, 5))
        block = CbnBlock(np.random.default_rng(9), 4, 5, 6)
        r2 = np.random.default_rng(10)
        block.gamma.data[:] = r2.uniform(0.5, 1.5, 4)
        block.beta.data[:] = r2.uniform(-0.5, 0.5, 4)
        block.scale_head.weight.data[:] = r2.uniform(-0.3, 0.3, (4, 6))
        block.shift_head.weight.data[:] = r2.uniform(-0.3, 0.3, (4, 6))
        out = block(T.tensor(feats), T.tensor(aux), training=True)
        # oracle: two-pass normalize, explicit delta-MLP, per-sample affine
        mean = feats.mean(axis=(0, 2, 3))
        var = feats.var(axis=(0, 2, 3))
        xhat = (feats - mean[None, :, None, None]) / np.sqrt(var + 1e-5)[None, :, None, None]
        hid = np.maximum(aux @ block.hidden.weight.data.T + block.hidden.bias.data, 0)
        dg = hid @ block.scale_head.weight.data.T + block.scale_head.bias.data
        db = hid @ block.shift_head.weight.data.T + block.shift_head.bias.data
        oracle = np.empty_like(feats)
        for n in range(2):
            for c in range(4):
                oracle[n, c] = (block.gamma.data[c] + dg[n, c]) * xhat[n, c] \
                    + (block.beta.data[c] + db[n, c])
        np.testing.assert_allclose(out.data, oracle, atol=1e-10, rtol=0)

    def test_dim_aux_mismatch(self):
        block = make_cbn()
        with pytest.raises(ShapeError, match="aux"):
            block(T.zeros((2, 3, 2, 2)), T.zeros((2, 9)), training=True)

    def test_grad_check(self):
        rng = np.random.default_rng(4)
        block = make_cbn(nonzero=True)
        feats = T.tensor(rng.uniform(-1, 1, (3, 3, 2, 2)), requires_grad=True)
        aux = T.tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        params = list(nn.flatten_tree(block.parameters()).values())
        probe = T.tensor(rng.uniform(0.5, 1.5, (3, 3, 2, 2)))

        def loss(f, a, *ps):
            return T.reduce_sum(T.mul(block(f, a, training=True), probe))

        assert grad_check(loss, [feats, aux] + params) < 1e-4


class TestReplicateAndConcat:
    def test_zero_width_aux_is_identity(self):
        feats = T.tensor(np.random.default_rng(5).uniform(-1, 1, (2, 3, 2, 2)))
        out = replicate_and_concat(feats, T.zeros((2, 0)))
        assert out is feats

    def test_single_position_example(self):
        out = replicate_and_concat(T.tensor([[[[7.0]]]]), T.tensor([[3.0, 5.0]]))
        assert np.array_equal(out.data.reshape(-1), [7.0, 3.0, 5.0])

    def test_positional_oracle(self):
        rng = np.random.default_rng(6)
        feats = rng.uniform(-1, 1, (2, 3, 2, 4))
        aux = rng.uniform(-1, 1, (2, 5))
        out = replicate_and_concat(T.tensor(feats), T.tensor(aux)).data
        assert out.shape == (2, 8, 2, 4)
        for n in range(2):
            for h in range(2):
                for w in range(4):
                    assert np.array_equal(out[n, :3, h, w], feats[n, :, h, w])
                    assert np.array_equal(out[n, 3:, h, w], aux[n])

    def test_batch_mismatch(self):
        with pytest.raises(ShapeError, match="batch"):
            replicate_and_concat(T.zeros((2, 3, 2, 2)), T.zeros((3, 4)))


class TestSpatialAttention:
    def test_constant_logits_give_spatial_mean(self):
        rng = np.random.default_rng(7)
        block = SpatialAttentionBlock(np.random.default_rng(8), 3, 4, 6)
        block.out.weight.data[:] = 0.0  # constant (zero) logits everywhere
        feats = rng.uniform(-1, 1, (2, 3, 2, 2))
        aux = rng.uniform(-1, 1, (2, 4))
        pooled, attn = spatial_attention(block, T.tensor(feats), T.tensor(aux))
        np.testing.assert_allclose(attn.data, 0.25, atol=1e-12)
        np.testing.assert_allclose(pooled.data, feats.mean(axis=(2, 3)), atol=1e-10,
                                   rtol=0)

    def test_dominant_logit_limit(self):
        # one position's feature drives a huge logit; pooling collapses there
        block = SpatialAttentionBlock(np.random.default_rng(9), 2, 1, 3)
        block.score.weight.data[:] = 0.0
        block.score.weight.data[0, 0] = 1.0   # hidden0 = relu(channel0)
        block.score.bias.data[:] = 0.0
        block.out.weight.data[:] = 0.0
        block.out.weight.data[0, 0] = 50.0    # logit = 50 * relu(channel0)
        feats = np.zeros((1, 2, 2, 2))
        feats[0, 0, 1, 0] = 2.0               # position index 2 dominates
        feats[0, 1] = [[0.1, 0.2], [0.3, 0.4]]
        pooled, attn = block(T.tensor(feats), T.tensor(np.zeros((1, 1))))
        assert attn.data[0].argmax() == 2
        assert attn.data[0, 2] > 0.999999
        np.testing.assert_allclose(pooled.data[0], feats[0, :, 1, 0], atol=1e-5)

    def test_against_brute_force_oracle(self):
        rng = np.random.default_rng(10)
        block = SpatialAttentionBlock(np.random.default_rng(11), 3, 2, 5)
        feats = rng.uniform(-1, 1, (2, 3, 2, 2))
        aux = rng.uniform(-1, 1, (2, 2))
        pooled, attn = block(T.tensor(feats), T.tensor(aux))
        w1, b1 = block.score.weight.data, block.score.bias.data
        w2 = block.out.weight.data
        for n in range(2):
            logits = np.empty(4)
            for p in range(4):
                h, w = divmod(p, 2)
                vec = np.concatenate([feats[n, :, h, w], aux[n]])
                logits[p] = (np.maximum(vec @ w1.T + b1, 0) @ w2.T)[0]
            e = np.exp(logits - logits.max())
            a = e / e.sum()
            np.testing.assert_allclose(attn.data[n], a, atol=1e-10, rtol=0)
            expected = np.zeros(3)
            for p in range(4):
                h, w = divmod(p, 2)
                expected += a[p] * feats[n, :, h, w]
            np.testing.assert_allclose(pooled.data[n], expected, atol=1e-10, rtol=0)

    def test_attention_rows_normalized_and_shift_invariant(self):
        rng = np.random.default_rng(12)
        block = SpatialAttentionBlock(np.random.default_rng(13), 3, 2, 5)
        feats = rng.uniform(-1, 1, (3, 3, 2, 3))
        aux = rng.uniform(-1, 1, (3, 2))
        _, attn = block(T.tensor(feats), T.tensor(aux))
        assert np.all(attn.data >= 0)
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(14)
        block = SpatialAttentionBlock(np.random.default_rng(15), 3, 2, 5)
        feats = rng.uniform(-1, 1, (2, 3, 2, 2))
        aux = rng.uniform(-1, 1, (2, 2))
        pooled, attn = block(T.tensor(feats), T.tensor(aux))
        # swap the two spatial rows; logits permute, pooled is unchanged
        permuted = feats[:, :, ::-1, :].copy()
        pooled_p, attn_p = block(T.tensor(permuted), T.tensor(aux))
        perm = [2, 3, 0, 1]
        np.testing.assert_allclose(attn_p.data, attn.data[:, perm], atol=1e-12)
        np.testing.assert_allclose(pooled_p.data, pooled.data, atol=1e-10)


class TestHighFusion:
    def test_zero_aux_gate_closes(self):
        rng = np.random.default_rng(16)
        block = HighFusionBlock(np.random.default_rng(17), 3, 2, 4)
        block.aux.weight.data[:] = 0.0
        out = block(T.tensor(rng.uniform(-1, 1, (3, 3))), T.tensor(rng.uniform(-1, 1, (3, 2))))
        assert np.all(out.data == 0.0)

    def test_saturation_toward_one(self):
        # tanh rounds to exactly 1.0 in float64 once its argument passes ~19,
        # so the one-sided limit is probed just inside the representable range
        block = HighFusionBlock(np.random.default_rng(18), 1, 1, 1)
        block.visual.weight.data[:] = 1.0
        block.aux.weight.data[:] = 1.0
        out = block(T.tensor([[15.0]]), T.tensor([[15.0]]))
        assert 0.999999 < out.data[0, 0] < 1.0

    def test_against_formula_oracle(self):
        rng = np.random.default_rng(19)
        block = HighFusionBlock(np.random.default_rng(20), 3, 2, 4)
        vis = rng.uniform(-1, 1, (2, 3))
        aux = rng.uniform(-1, 1, (2, 2))
        out = high_level_fuse(block, T.tensor(vis), T.tensor(aux))
        oracle = np.tanh(vis @ block.visual.weight.data.T + block.visual.bias.data) \
            * np.tanh(aux @ block.aux.weight.data.T + block.aux.bias.data)
        np.testing.assert_allclose(out.data, oracle, atol=1e-12, rtol=0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_output_strictly_inside_unit_box(self, seed):
        # bounded inputs keep the tanh arguments inside the float64 range
        # where the open interval survives rounding
        rng = np.random.default_rng(seed)
        block = HighFusionBlock(np.random.default_rng(seed + 1), 2, 2, 3)
        out = block(T.tensor(rng.uniform(-4, 4, (2, 2))),
                    T.tensor(rng.uniform(-4, 4, (2, 2))))
        assert np.all(np.abs(out.data) < 1.0)

    def test_dim_mismatch(self):
        block = HighFusionBlock(np.random.default_rng(21), 3, 2, 4)
        with pytest.raises(ShapeError):
            block(T.zeros((2, 5)), T.zeros((2, 2)))
