"""
テンソル演算と逆伝播のテスト
"""

import math

import numpy as np
import pytest

from error_handler import LabelRangeError, ShapeError, StateError
from tensor_core import (Tensor, batchnorm2d, conv2d, get_dtype, global_avg_pool, grad_check, matmul, mean,
                         no_grad, precision, relu, row_norm, softmax_cross_entropy, square, take_rows, tensor_sum)


def naive_conv(x, w, b, stride, padding):
    n, c_in, h, width = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for i in range(n):
        for o in range(c_out):
            for y in range(h_out):
                for x_ in range(w_out):
                    patch = xp[i, :, y * stride:y * stride + k, x_ * stride:x_ * stride + k]
                    out[i, o, y, x_] = np.sum(patch * w[o]) + b[o]
    return out


class TestPrecision:
    def test_default_is_float32(self):
        assert get_dtype() == np.float32

    def test_context_restores(self):
        with precision("float64"):
            assert get_dtype() == np.float64
        assert get_dtype() == np.float32


class TestMatmul:
    def test_example(self, float64):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_gradients(self, float64):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        tensor_sum(matmul(a, b)).backward()
        np.testing.assert_array_equal(a.grad, [[11.0, 15.0], [11.0, 15.0]])
        np.testing.assert_array_equal(b.grad, [[4.0, 4.0], [6.0, 6.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestConv2d:
    @pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (2, 0, 3)])
    def test_integer_inputs_match_loop_exactly(self, float64, stride, padding, kernel):
        rng = np.random.default_rng(0)
        x = rng.integers(-3, 4, size=(2, 3, 7, 7)).astype(np.float64)
        w = rng.integers(-2, 3, size=(4, 3, kernel, kernel)).astype(np.float64)
        b = rng.integers(-2, 3, size=4).astype(np.float64)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_array_equal(out.data, naive_conv(x, w, b, stride, padding))

    def test_random_inputs_match_loop(self, float64):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2, 1), atol=1e-12)

    def test_identity_kernel(self, float64):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestBatchNorm:
    def test_inference_example(self, float64):
        x = Tensor(np.full((1, 1, 2, 2), 3.0))
        out = batchnorm2d(x, Tensor([2.0]), Tensor([1.0]), np.array([1.0]), np.array([4.0]), eps=0.0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))

    def test_training_normalizes_and_updates_running_stats(self, float64):
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        running_mean, running_var = np.zeros(1), np.ones(1)
        out = batchnorm2d(x, Tensor([1.0]), Tensor([0.0]), running_mean, running_var, eps=1e-5, training=True)
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)
        np.testing.assert_allclose(running_mean, [0.2])
        # 不偏分散 2 で更新
        np.testing.assert_allclose(running_var, [0.9 + 0.1 * 2.0])


class TestLoss:
    def test_uniform_logits_give_log_k(self, float64):
        loss = softmax_cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
        assert loss.data == pytest.approx(math.log(4), abs=1e-12)

    def test_shift_invariance(self, float64):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 3))
        labels = np.array([0, 1, 2, 1, 0])
        base = softmax_cross_entropy(Tensor(logits), labels).data
        shifted = softmax_cross_entropy(Tensor(logits + 1000.0), labels).data
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(LabelRangeError):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestTape:
    def test_shared_subexpression_accumulates(self, float64):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        tensor_sum(y + y).backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = relu(x)
        assert not y.requires_grad

    def test_backward_on_constant_raises(self):
        with pytest.raises(StateError):
            Tensor([1.0]).backward()

    def test_global_avg_pool(self, float64):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
        np.testing.assert_array_equal(global_avg_pool(x).data, [[1.5, 5.5]])

    def test_grad_check_requires_float64(self):
        with pytest.raises(StateError):
            grad_check(lambda t: tensor_sum(t), Tensor([1.0]))


class TestScalars:
    def test_loss_is_zero_dimensional(self, float64):
        loss = softmax_cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 1]))
        assert loss.shape == ()
        assert mean(Tensor(np.ones((2, 3)))).shape == ()
        assert tensor_sum(Tensor(np.ones(3))).shape == ()

    def test_sum_over_only_axis(self, float64):
        v = Tensor(np.arange(3.0), requires_grad=True)
        total = tensor_sum(v, axis=0)
        assert total.shape == ()
        total.backward()
        np.testing.assert_array_equal(v.grad, np.ones(3))

    def test_item(self, float64):
        assert mean(Tensor([1.0, 2.0])).item() == 1.5
        with pytest.raises(ShapeError):
            Tensor(np.zeros(2)).item()


SEEDS = range(5)


class TestGradientChecks:
    """各層演算の中心差分検査（シードごと）"""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, float64, seed):
        rng = np.random.default_rng(seed)
        a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
        assert grad_check(lambda t: tensor_sum(square(matmul(t, b))), a) < 1e-6
        assert grad_check(lambda t: tensor_sum(square(matmul(a, t))), b) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, float64, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        stride = 1 + seed % 2
        assert grad_check(lambda t: tensor_sum(square(conv2d(t, w, b, stride=stride, padding=1))), x) < 1e-6
        assert grad_check(lambda t: tensor_sum(square(conv2d(x, t, b, stride=stride, padding=1))), w) < 1e-6
        assert grad_check(lambda t: tensor_sum(square(conv2d(x, w, t, stride=stride, padding=1))), b) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_training(self, float64, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(4, 3, 2, 2)))
        gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        weights = Tensor(rng.normal(size=(4, 3, 2, 2)))

        def bn(inp, g, b):
            return tensor_sum(batchnorm2d(inp, g, b, np.zeros(3), np.ones(3), training=True) * weights)

        assert grad_check(lambda t: bn(t, gamma, beta), x) < 1e-4
        assert grad_check(lambda t: bn(x, t, beta), gamma) < 1e-6
        assert grad_check(lambda t: bn(x, gamma, t), beta) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_inference(self, float64, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 2, 3, 3)))
        gamma, beta = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2))
        running_mean, running_var = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)

        def bn(inp, g, b):
            return tensor_sum(square(batchnorm2d(inp, g, b, running_mean, running_var)))

        assert grad_check(lambda t: bn(t, gamma, beta), x) < 1e-6
        assert grad_check(lambda t: bn(x, t, beta), gamma) < 1e-6
        assert grad_check(lambda t: bn(x, gamma, t), beta) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_global_avg_pool(self, float64, seed):
        rng = np.random.default_rng(seed)
        weights = Tensor(rng.normal(size=(2, 3)))
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert grad_check(lambda t: tensor_sum(square(global_avg_pool(t) * weights)), x) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cross_entropy(self, float64, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, size=5)
        assert grad_check(lambda t: softmax_cross_entropy(t, labels), Tensor(rng.normal(size=(5, 4)))) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_row_ops(self, float64, seed):
        rng = np.random.default_rng(seed)
        index = rng.integers(0, 3, size=4)
        assert grad_check(lambda t: mean(row_norm(take_rows(t, index))), Tensor(rng.normal(size=(3, 4)))) < 1e-6
