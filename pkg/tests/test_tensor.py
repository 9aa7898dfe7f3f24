"""Tensor engine: oracle comparisons, shape/error contracts, autodiff."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2fn import tensor as T
from m2fn.checkpoint import load_checkpoint, save_checkpoint
from m2fn.tensor import (ComputationTape, GradCheckError, NumericError,
                         ShapeError, TapeError, grad_check)


# -- nested-loop reference oracles (independent of the vectorized paths) ----

def conv_oracle(x, k, b, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] \
                                    * k[co, ci, di, dj]
                    out[ni, co, i, j] = acc + b[co]
    return out


def matmul_oracle(x, w, b):
    n, din = x.shape
    dout = w.shape[0]
    out = np.zeros((n, dout))
    for i in range(n):
        for o in range(dout):
            acc = 0.0
            for j in range(din):
                acc += x[i, j] * w[o, j]
            out[i, o] = acc + b[o]
    return out


def maxpool_oracle(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[ni, ci, i, j] = x[ni, ci, i * s:i * s + k, j * s:j * s + k].max()
    return out


def rt(rng, *shape):
    return T.tensor(rng.uniform(-1, 1, shape))


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(0)
        x = rt(rng, 2, 1, 5, 5)
        k = T.tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, k, T.zeros(1))
        assert np.array_equal(out.data, x.data)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(1)
        k = rt(rng, 3, 2, 3, 3)
        b = T.tensor([1.5, -2.0, 0.25])
        out = T.conv2d(T.zeros((2, 2, 4, 4)), k, b, padding=1)
        for c, bv in enumerate(b.data):
            assert np.all(out.data[:, c] == bv)

    def test_spec_example_against_oracle(self):
        x = np.array([[[[1., 2., 3.], [4., 5., 6.], [7., 8., 9.]]]])
        k = np.array([[[[1., 0.], [0., 1.]]]])
        b = np.zeros(1)
        out = T.conv2d(T.tensor(x), T.tensor(k), T.tensor(b))
        expected = conv_oracle(x, k, b, 1, 0)
        assert np.array_equal(out.data, expected)
        # the diagonal 2x2 kernel sums x[i,j] + x[i+1,j+1]
        assert np.array_equal(expected[0, 0], [[6., 8.], [12., 14.]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_random_against_oracle_bitexact(self, stride, pad):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, (2, 3, 5, 6))
        k = rng.uniform(-1, 1, (4, 3, 2, 3))
        b = rng.uniform(-1, 1, 4)
        out = T.conv2d(T.tensor(x), T.tensor(k), T.tensor(b), stride=stride, padding=pad)
        oracle = conv_oracle(x, k, b, stride, pad)
        np.testing.assert_allclose(out.data, oracle, rtol=0, atol=1e-12)

    def test_output_shape_formula(self):
        out = T.conv2d(T.zeros((1, 1, 9, 7)), T.zeros((2, 1, 3, 3)), T.zeros(2),
                       stride=2, padding=1)
        assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(T.zeros((1, 3, 4, 4)), T.zeros((2, 2, 3, 3)), T.zeros(2))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError, match="exceeds"):
            T.conv2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 5, 5)), T.zeros(1))


class TestBatchNorm:
    def test_constant_input_outputs_beta(self):
        x = T.tensor(np.full((4, 3, 2, 2), 2.7))
        out = T.batch_norm(x, T.ones(3), T.tensor([5.0, 5.0, 5.0]))
        np.testing.assert_allclose(out.data, 5.0, atol=1e-10)

    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = T.batch_norm(T.tensor(x), T.ones(2), T.zeros(2), eps=1e-5)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, (4, 3, 2, 2))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.uniform(-1, 1, 3)
        out = T.batch_norm(T.tensor(x), T.tensor(gamma), T.tensor(beta), eps=1e-5)
        oracle = np.empty_like(x)
        for c in range(3):
            vals = x[:, c]
            mean = vals.sum() / vals.size
            var = ((vals - mean) ** 2).sum() / vals.size
            oracle[:, c] = gamma[c] * (vals - mean) / np.sqrt(var + 1e-5) + beta[c]
        np.testing.assert_allclose(out.data, oracle, rtol=0, atol=1e-10)

    def test_train_output_standardized(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-3, 3, (8, 4, 3, 3))
        out = T.bn_normalize(T.tensor(x))
        assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) < 1e-6)
        assert np.all(np.abs(out.data.var(axis=(0, 2, 3)) - 1.0) < 1e-4)

    def test_batch_too_small(self):
        with pytest.raises(ShapeError, match="batch size"):
            T.batch_norm(T.zeros((1, 2, 2, 2)), T.ones(2), T.zeros(2))

    def test_running_stats_ema(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (6, 2, 2, 2))
        run = T.RunningStats(2)
        T.bn_normalize(T.tensor(x), running=run, momentum=0.1)
        np.testing.assert_allclose(run.mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(run.var, 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)),
                                   atol=1e-12)

    def test_eval_mode_uses_running_stats(self):
        run = T.RunningStats(1)
        run.mean[:] = 2.0
        run.var[:] = 4.0
        x = T.tensor(np.full((1, 1, 1, 2), 4.0))
        out = T.batch_norm(x, T.ones(1), T.zeros(1), eps=0.0, training=False, running=run)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-12)


class TestDenseAffine:
    def test_identity(self):
        rng = np.random.default_rng(8)
        x = rt(rng, 3, 4)
        out = T.dense_affine(x, T.tensor(np.eye(4)), T.zeros(4))
        assert np.array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        b = T.tensor([1.0, 2.0])
        out = T.dense_affine(T.tensor(np.random.default_rng(9).normal(size=(3, 5))),
                             T.zeros((2, 5)), b)
        assert np.array_equal(out.data, np.tile(b.data, (3, 1)))

    def test_against_matmul_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, (2, 3))
        w = rng.uniform(-1, 1, (4, 3))
        b = rng.uniform(-1, 1, 4)
        out = T.dense_affine(T.tensor(x), T.tensor(w), T.tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(x, w, b), rtol=0, atol=1e-15)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dims"):
            T.dense_affine(T.zeros((2, 3)), T.zeros((4, 5)), T.zeros(4))


class TestSoftmax:
    def test_equal_logits(self):
        out = T.softmax_lastdim(T.tensor(np.full((2, 5), 3.3)))
        np.testing.assert_allclose(out.data, 0.2, atol=1e-12)

    def test_closed_form(self):
        out = T.softmax_lastdim(T.tensor([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_rows_normalized_and_shift_invariant(self, logits, c):
        x = np.array([logits])
        a = T.softmax_lastdim(T.tensor(x)).data
        b = T.softmax_lastdim(T.tensor(x + c)).data
        assert abs(a.sum() - 1.0) < 1e-6
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert np.all(a >= 0)


class TestElementwiseOracles:
    """relu, tanh, max-pool, mul/add, concat, replication: bit-for-bit
    against plain-loop references on small shapes."""

    def setup_method(self):
        self.rng = np.random.default_rng(11)

    def test_relu(self):
        x = self.rng.uniform(-1, 1, (3, 4))
        expected = np.array([[v if v > 0 else 0.0 for v in row] for row in x])
        assert np.array_equal(T.relu(T.tensor(x)).data, expected)

    def test_tanh(self):
        x = self.rng.uniform(-2, 2, (3, 4))
        expected = np.array([[np.tanh(v) for v in row] for row in x])
        assert np.array_equal(T.tanh(T.tensor(x)).data, expected)

    def test_mul_add(self):
        a = self.rng.uniform(-1, 1, (2, 3))
        b = self.rng.uniform(-1, 1, (2, 3))
        assert np.array_equal(T.mul(T.tensor(a), T.tensor(b)).data,
                              np.array([[a[i, j] * b[i, j] for j in range(3)]
                                        for i in range(2)]))
        assert np.array_equal(T.add(T.tensor(a), T.tensor(b)).data,
                              np.array([[a[i, j] + b[i, j] for j in range(3)]
                                        for i in range(2)]))

    def test_max_pool(self):
        x = self.rng.uniform(-1, 1, (2, 2, 4, 6))
        out = T.max_pool2d(T.tensor(x), 2)
        assert np.array_equal(out.data, maxpool_oracle(x, 2, 2))

    def test_max_pool_drops_remainder(self):
        x = self.rng.uniform(-1, 1, (1, 1, 5, 5))
        out = T.max_pool2d(T.tensor(x), 2)
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data, maxpool_oracle(x, 2, 2))

    def test_concat(self):
        a = self.rng.uniform(-1, 1, (2, 2))
        b = self.rng.uniform(-1, 1, (2, 3))
        out = T.concat([T.tensor(a), T.tensor(b)], axis=1)
        expected = np.array([list(a[i]) + list(b[i]) for i in range(2)])
        assert np.array_equal(out.data, expected)

    def test_concat_shape_error(self):
        with pytest.raises(ShapeError, match="axis 0"):
            T.concat([T.zeros((2, 2)), T.zeros((3, 2))], axis=1)

    def test_replicate_spatial(self):
        a = self.rng.uniform(-1, 1, (2, 3))
        out = T.replicate_spatial(T.tensor(a), 2, 4)
        for n in range(2):
            for c in range(3):
                assert np.all(out.data[n, c] == a[n, c])

    def test_replicate_rows(self):
        v = self.rng.uniform(-1, 1, 5)
        out = T.replicate_rows(T.tensor(v), 3)
        assert np.array_equal(out.data, np.stack([v, v, v]))

    def test_attention_pool_oracle(self):
        feats = self.rng.uniform(-1, 1, (2, 3, 2, 2))
        attn = self.rng.uniform(0, 1, (2, 4))
        out = T.attention_pool(T.tensor(feats), T.tensor(attn))
        expected = np.zeros((2, 3))
        flat = feats.reshape(2, 3, 4)
        for n in range(2):
            for c in range(3):
                for p in range(4):
                    expected[n, c] += attn[n, p] * flat[n, c, p]
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


class TestAutodiff:
    def test_grad_of_sum_is_exactly_ones(self):
        # integer data + power-of-two eps keep the central difference exact,
        # so sum's error is literally zero
        x = T.tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
        err = grad_check(lambda t: T.reduce_sum(t), [x], eps=0.25)
        assert err == 0.0
        assert np.array_equal(x.grad, np.ones((3, 3)))

    def test_grad_check_tanh_squared(self):
        x = T.tensor(np.random.default_rng(13).uniform(-1, 1, (4, 3)), requires_grad=True)
        err = grad_check(lambda t: T.reduce_sum(T.square(T.tanh(t))), [x])
        assert err < 1e-4

    def test_grad_check_rejects_nonscalar(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradCheckError, match="scalar"):
            grad_check(lambda t: T.square(t), [x])

    def test_grad_check_rejects_float32(self):
        x = T.tensor([1.0], requires_grad=True, dtype=np.float32)
        with pytest.raises(GradCheckError, match="float64"):
            grad_check(lambda t: T.reduce_sum(t), [x])

    def test_backward_twice_is_error(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        y = T.reduce_sum(T.square(x))
        y.backward()
        with pytest.raises(TapeError):
            y.backward()

    def test_tape_topological_order(self):
        x = T.tensor([1.0], requires_grad=True)
        a = T.square(x)
        b = T.tanh(x)
        c = T.add(a, b)
        nodes = ComputationTape(c).nodes
        order = {id(n): i for i, n in enumerate(nodes)}
        for node in nodes:
            for parent in node._parents:
                assert order[id(parent)] < order[id(node)]

    def test_grad_accumulates_across_uses(self):
        x = T.tensor([2.0], requires_grad=True)
        y = T.add(T.square(x), T.square(x))
        y.backward()
        np.testing.assert_allclose(x.grad, [8.0], atol=1e-12)

    def test_nonfinite_raises_with_op_name(self):
        bad = T.tensor([np.inf])
        with pytest.raises(NumericError, match="add"):
            T.add(bad, T.tensor([1.0]))

    def test_log_of_nonpositive_raises(self):
        with pytest.raises(NumericError):
            T.log(T.tensor([0.0]))


class TestCheckpoint:
    def test_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(14)
        params = {"a.weight": T.tensor(rng.normal(size=(3, 4)) / 3.0),
                  "b.bias": T.tensor(rng.normal(size=7) * 1e-17)}
        buffers = {"bn.running_mean": rng.normal(size=4)}
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, buffers, meta={"note": "test"})
        tensors, meta = load_checkpoint(path)
        assert meta["note"] == "test"
        for name, t in params.items():
            assert tensors[name].dtype == np.float64
            assert np.array_equal(tensors[name], t.data)
            assert tensors[name].tobytes() == t.data.tobytes()
        assert np.array_equal(tensors["bn.running_mean"], buffers["bn.running_mean"])
