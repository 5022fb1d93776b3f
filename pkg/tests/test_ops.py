"""Network primitives against naive oracles and finite differences."""

import math

import numpy as np
import pytest

from conftest import gradcheck
from vitslim import ops
from vitslim.errors import ShapeError
from vitslim.tensor import Tensor


def t(a, rg=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=rg)


# ---- oracles -------------------------------------------------------------------


def conv2d_oracle(x, w, b, stride, pad):
    """Six nested loops, float64."""
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((B, O, Ho, Wo))
    for bi in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                acc += xp[bi, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[bi, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def avgpool_oracle(x):
    """3x3/s1/p1 average with the padding excluded from the divisor."""
    B, C, H, W = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for bi in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc, cnt = 0.0, 0
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ii, jj = i + di, j + dj
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += float(x[bi, c, ii, jj])
                                cnt += 1
                    out[bi, c, i, j] = acc / cnt
    return out


def mhsa_oracle(x, wq, wk, wv, wo, bias, heads):
    """Per-head loops in float64."""
    B, N, C = x.shape
    d_qk = wq.shape[1] // heads
    d_v = wv.shape[1] // heads
    x64 = x.astype(np.float64)
    out = np.zeros((B, N, heads * d_v))
    for bi in range(B):
        for h in range(heads):
            q = x64[bi] @ wq[:, h * d_qk:(h + 1) * d_qk]
            k = x64[bi] @ wk[:, h * d_qk:(h + 1) * d_qk]
            v = x64[bi] @ wv[:, h * d_v:(h + 1) * d_v]
            logits = q @ k.T / math.sqrt(d_qk) + bias[h]
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            out[bi, :, h * d_v:(h + 1) * d_v] = a @ v
    return out @ wo


# ---- activations ---------------------------------------------------------------


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_allclose(ops.relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_gelu_reference_points(self):
        # tanh approximation of the Gaussian error linear unit
        x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0], dtype=np.float32)
        want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(ops.gelu(t(x)).data, want, rtol=1e-6)
        assert abs(float(ops.gelu(t([0.0])).data[0])) < 1e-7

    def test_hardswish_values(self):
        x = t([-4.0, -3.0, 0.0, 3.0, 4.0])
        np.testing.assert_allclose(ops.hardswish(x).data, [0, 0, 0, 3, 4])

    def test_activation_dispatch(self):
        x = t([1.0])
        for kind in ("gelu", "relu", "hardswish"):
            ops.activation(kind, x)
        with pytest.raises(ValueError):
            ops.activation("swish", x)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        # keep samples away from the hardswish kinks at +-3 and relu kink at 0
        a = rng.standard_normal((4, 5)) * 1.3
        a = a[(np.abs(np.abs(a) - 3.0) > 0.05) & (np.abs(a) > 0.05)].reshape(-1, 1)
        gradcheck(ops.gelu, [a])
        gradcheck(ops.relu, [a])
        gradcheck(ops.hardswish, [a])


# ---- convolution / pooling -----------------------------------------------------


class TestConv:
    def test_1x1_identity_permutation(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        perm = [2, 0, 1]
        for o, c in enumerate(perm):
            w[o, c, 0, 0] = 1.0
        out = ops.conv2d(t(x), t(w), None)
        np.testing.assert_allclose(out.data, x[:, perm], rtol=1e-6)

    def test_stride2_output_size(self):
        x = t(np.zeros((1, 3, 224, 224)))
        w = t(np.zeros((8, 3, 3, 3)))
        assert ops.conv2d(x, w, None, stride=2, padding=1).shape == (1, 8, 112, 112)

    @pytest.mark.parametrize("seed", range(3))
    def test_against_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 8, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 8, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        for stride, pad in ((1, 1), (2, 1), (1, 0)):
            got = ops.conv2d(t(x), t(w), t(b), stride, pad).data
            want = conv2d_oracle(x, w, b, stride, pad)
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ops.conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 5, 3, 3))), None)
        with pytest.raises(ShapeError):
            ops.conv2d(t(np.zeros((3, 4, 4))), t(np.zeros((2, 3, 3, 3))), None)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3)) * 0.4
        b = rng.standard_normal(4)
        gradcheck(lambda x, w, b: ops.conv2d(x, w, b, 2, 1), [x, w, b], probes=25)


class TestAvgPool:
    def test_constant_input(self):
        out = ops.avgpool3x3(t(np.full((1, 2, 5, 5), 7.0)))
        np.testing.assert_allclose(out.data, 7.0, rtol=1e-6)

    def test_hand_row(self):
        out = ops.avgpool3x3(t(np.array([[[[1.0, 2.0, 3.0]]]])))
        np.testing.assert_allclose(out.data[0, 0, 0], [1.5, 2.0, 2.5])

    @pytest.mark.parametrize("seed", range(3))
    def test_against_naive_oracle(self, seed):
        x = np.random.default_rng(seed).standard_normal((2, 3, 6, 5)).astype(np.float32)
        np.testing.assert_allclose(ops.avgpool3x3(t(x)).data, avgpool_oracle(x), atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_gradients(self, seed):
        x = np.random.default_rng(seed).standard_normal((2, 2, 5, 5))
        gradcheck(ops.avgpool3x3, [x])


# ---- normalizations ------------------------------------------------------------


class TestBatchNorm:
    def test_inference_identity_params(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = ops.batchnorm(t(x), t(np.ones(3)), t(np.zeros(3)),
                            np.zeros(3, np.float32), np.ones(3, np.float32))
        np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5), atol=1e-6)

    def test_training_moments(self):
        x = np.random.default_rng(1).standard_normal((4, 3, 8, 8)).astype(np.float32)
        out = ops.batchnorm(t(x), t(np.ones(3)), t(np.zeros(3)),
                            np.zeros(3, np.float32), np.ones(3, np.float32), training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_training_constant_batch_gives_beta(self):
        x = np.ones((2, 3, 4, 4), dtype=np.float32) * np.arange(3, dtype=np.float32).reshape(1, 3, 1, 1)
        beta = np.array([5.0, 6.0, 7.0], dtype=np.float32)
        out = ops.batchnorm(t(x), t(np.ones(3)), t(beta),
                            np.zeros(3, np.float32), np.ones(3, np.float32), training=True)
        np.testing.assert_allclose(out.data, beta.reshape(1, 3, 1, 1) * np.ones_like(x), atol=1e-3)

    def test_running_stats_update(self):
        x = np.random.default_rng(2).standard_normal((8, 2, 4, 4)).astype(np.float32) * 2 + 1
        rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
        ops.batchnorm(t(x), t(np.ones(2)), t(np.zeros(2)), rm, rv, momentum=1.0, training=True)
        np.testing.assert_allclose(rm, x.mean(axis=(0, 2, 3)), atol=1e-5)
        n = x[:, 0].size
        np.testing.assert_allclose(rv, x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-4)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_train_mode_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 2, 4, 4))
        g, b = rng.standard_normal(2), rng.standard_normal(2)
        gradcheck(lambda x, g, b: ops.batchnorm(x, g, b, np.zeros(2), np.ones(2), training=True),
                  [x, g, b], probes=25)


class TestLayerGroupNorm:
    def test_ln_constant_vector_gives_beta(self):
        x = np.full((2, 5), 3.0, dtype=np.float32)
        beta = np.arange(5, dtype=np.float32)
        out = ops.layernorm(t(x), t(np.ones(5)), t(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (2, 5)), atol=1e-2)

    def test_ln_standardizes(self):
        x = np.random.default_rng(0).standard_normal((4, 16)).astype(np.float32) * 3
        out = ops.layernorm(t(x), t(np.ones(16)), t(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_gn_with_groups_equal_channels_is_instance_norm(self):
        x = np.random.default_rng(1).standard_normal((2, 4, 5, 5)).astype(np.float32)
        got = ops.groupnorm(t(x), 4, t(np.ones(4)), t(np.zeros(4))).data
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        np.testing.assert_allclose(got, (x - mu) / np.sqrt(var + 1e-5), atol=1e-4)

    def test_gn_group_divisibility(self):
        with pytest.raises(ShapeError):
            ops.groupnorm(t(np.zeros((1, 5, 2, 2))), 2, t(np.ones(5)), t(np.zeros(5)))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x3 = rng.standard_normal((2, 3, 6))
        gradcheck(lambda x, g, b: ops.layernorm(x, g, b),
                  [x3, rng.standard_normal(6), rng.standard_normal(6)])
        x4 = rng.standard_normal((2, 4, 3, 3))
        gradcheck(lambda x, g, b: ops.groupnorm(x, 2, g, b),
                  [x4, rng.standard_normal(4), rng.standard_normal(4)])


# ---- linear / softmax / loss ---------------------------------------------------


class TestSoftmaxLoss:
    def test_softmax_simplex(self):
        x = np.random.default_rng(0).standard_normal((3, 7)).astype(np.float32) * 5
        s = ops.softmax(t(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert (s > 0).all()

    def test_softmax_large_logits_stable(self):
        s = ops.softmax(t([[1000.0, 1000.0]])).data
        np.testing.assert_allclose(s, [[0.5, 0.5]])

    def test_cross_entropy_uniform(self):
        loss = ops.cross_entropy(t(np.zeros((4, 10))), np.arange(4))
        np.testing.assert_allclose(float(loss.data), math.log(10), rtol=1e-6)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError):
            ops.cross_entropy(t(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_grad_formula(self):
        x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
        logits = t(x, rg=True)
        ops.cross_entropy(logits, np.array([1, 0, 3])).backward()
        p = np.exp(x - x.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(3), [1, 0, 3]] -= 1
        np.testing.assert_allclose(logits.grad, p / 3, atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        gradcheck(lambda x: ops.softmax(x, axis=-1), [rng.standard_normal((3, 5))])
        gradcheck(lambda x, w, b: ops.linear(x, w, b),
                  [rng.standard_normal((2, 4)), rng.standard_normal((4, 3)),
                   rng.standard_normal(3)])


# ---- attention -----------------------------------------------------------------


class TestMhsa:
    def _weights(self, rng, c, heads, d_qk, d_v, n):
        return dict(
            wq=rng.standard_normal((c, heads * d_qk)) * 0.3,
            wk=rng.standard_normal((c, heads * d_qk)) * 0.3,
            wv=rng.standard_normal((c, heads * d_v)) * 0.3,
            wo=rng.standard_normal((heads * d_v, c)) * 0.3,
            bias=rng.standard_normal((heads, n, n)) * 0.3,
        )

    def test_single_token(self):
        rng = np.random.default_rng(0)
        w = self._weights(rng, 8, 2, 4, 4, 1)
        x = rng.standard_normal((1, 1, 8)).astype(np.float32)
        got = ops.mhsa(t(x), t(w["wq"]), t(w["wk"]), t(w["wv"]), t(w["wo"]),
                       t(np.zeros((2, 1, 1))), heads=2).data
        want = (x[0] @ w["wv"]) @ w["wo"]  # softmax over one token is 1
        np.testing.assert_allclose(got[0], want, atol=1e-4)

    def test_uniform_bias_shift_invariance(self):
        rng = np.random.default_rng(1)
        w = self._weights(rng, 8, 2, 4, 4, 4)
        x = rng.standard_normal((1, 4, 8)).astype(np.float32)
        args = [t(w["wq"]), t(w["wk"]), t(w["wv"]), t(w["wo"])]
        a = ops.mhsa(t(x), *args, t(w["bias"]), heads=2).data
        b = ops.mhsa(t(x), *args, t(w["bias"] + 5.0), heads=2).data
        np.testing.assert_allclose(a, b, atol=1e-4)

    @pytest.mark.parametrize("seed", range(3))
    def test_against_per_head_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c, heads, d_qk, d_v, n = 16, 2, 8, 8, 4
        w = self._weights(rng, c, heads, d_qk, d_v, n)
        x = rng.standard_normal((1, n, c)).astype(np.float32)
        got = ops.mhsa(t(x), t(w["wq"]), t(w["wk"]), t(w["wv"]), t(w["wo"]),
                       t(w["bias"]), heads=heads).data
        want = mhsa_oracle(x, w["wq"], w["wk"], w["wv"], w["wo"], w["bias"], heads)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_token_count_mismatch(self):
        rng = np.random.default_rng(0)
        w = self._weights(rng, 8, 2, 4, 4, 4)
        with pytest.raises(ShapeError):
            ops.mhsa(t(rng.standard_normal((1, 5, 8))), t(w["wq"]), t(w["wk"]),
                     t(w["wv"]), t(w["wo"]), t(w["bias"]), heads=2)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.usefixtures("f64")
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        c, heads, d_qk, d_v, n = 8, 2, 4, 4, 3
        w = self._weights(rng, c, heads, d_qk, d_v, n)
        x = rng.standard_normal((1, n, c))
        gradcheck(lambda x, wq, wk, wv, wo, bias:
                  ops.mhsa(x, wq, wk, wv, wo, bias, heads=heads),
                  [x, w["wq"], w["wk"], w["wv"], w["wo"], w["bias"]], probes=15)
