"""
拡張・融合のテスト
"""

import numpy as np
import pytest

from constants import EngineConstants
from error_handler import StateError, StructuralError
from reparam import AdapterKind, BatchNormParams, ConvBlock, expand, fuse, fuse_conv_bn, pad_1x1_to_3x3
from tensor_core import Tensor, batchnorm2d, conv2d, precision


def randomize_bn(bn: BatchNormParams, rng) -> None:
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, size=bn.channels)
    bn.beta.data[...] = rng.normal(0.0, 0.3, size=bn.channels)
    bn.running_mean[...] = rng.normal(0.0, 0.3, size=bn.channels)
    bn.running_var[...] = rng.uniform(0.5, 2.0, size=bn.channels)


def random_expanded_block(seed: int, kind: AdapterKind, stride: int) -> ConvBlock:
    """主枝・アダプタ・BN 統計をすべて乱数化した拡張済みブロック"""
    rng = np.random.default_rng(seed)
    block = ConvBlock.create(3, 4, stride, rng)
    block.main_bias.data[...] = rng.normal(0.0, 0.1, size=4)
    randomize_bn(block.main_bn, rng)
    expanded = expand(block, kind)
    adapter = expanded.adapter
    adapter.weight.data[...] = rng.normal(0.0, 0.3, size=adapter.weight.shape)
    if adapter.bias is not None:
        adapter.bias.data[...] = rng.normal(0.0, 0.1, size=4)
    if adapter.bn is not None:
        randomize_bn(adapter.bn, rng)
    return expanded


def max_deviation(block: ConvBlock, seed: int) -> float:
    x = Tensor(np.random.default_rng(seed + 10_000).uniform(0.0, 1.0, size=(2, 3, 7, 7)))
    fused = fuse(block)
    expanded_out = block.forward(x, training=False).data
    fused_out = fused.forward(x, training=False).data
    return float(np.max(np.abs(expanded_out - fused_out)))


CASES = [(kind, stride) for kind in AdapterKind for stride in (1, 2)]


class TestFusionLossless:
    @pytest.mark.parametrize("kind,stride", CASES)
    @pytest.mark.parametrize("name", EngineConstants.PRECISIONS)
    def test_expanded_equals_fused(self, kind, stride, name):
        with precision(name):
            # 6 ケース x 17 シード = 102 インスタンス
            worst = max(max_deviation(random_expanded_block(seed, kind, stride), seed) for seed in range(17))
        assert worst <= EngineConstants.FUSION_TOLERANCE[name]

    def test_fused_block_has_pre_expansion_structure(self, rng):
        block = ConvBlock.create(3, 4, 2, rng)
        fused = fuse(expand(block, AdapterKind.CONV1X1_BN))
        assert fused.fingerprint() == block.fingerprint()
        assert fused.param_count() == block.param_count()
        assert not fused.is_expanded

    def test_repeated_expand_fuse_keeps_structure(self, float64, rng):
        block = ConvBlock.create(3, 4, 1, rng)
        current = block
        for _ in range(3):
            current = fuse(expand(current))
        assert current.fingerprint() == block.fingerprint()


class TestExpand:
    @pytest.mark.parametrize("kind", list(AdapterKind))
    def test_zero_init_preserves_output(self, float64, rng, kind):
        block = ConvBlock.create(3, 4, 2, rng)
        randomize_bn(block.main_bn, rng)
        x = Tensor(rng.uniform(size=(2, 3, 6, 6)))
        before = block.forward(x, training=False).data
        after = expand(block, kind).forward(x, training=False).data
        np.testing.assert_array_equal(before, after)

    def test_main_branch_frozen(self, rng):
        expanded = expand(ConvBlock.create(3, 4, 1, rng))
        assert all(not t.requires_grad for _, t in expanded.main_parameters())
        assert expanded.main_bn.frozen_stats
        assert all(t.requires_grad for _, t in expanded.adapter.parameters())

    def test_original_block_untouched(self, rng):
        block = ConvBlock.create(3, 4, 1, rng)
        expand(block)
        assert block.adapter is None
        assert block.main_weight.requires_grad

    def test_double_expand_rejected(self, rng):
        with pytest.raises(StateError):
            expand(expand(ConvBlock.create(3, 4, 1, rng)))

    def test_adapter_bias_optional(self, rng):
        expanded = expand(ConvBlock.create(3, 4, 1, rng), AdapterKind.CONV1X1, with_bias=False)
        assert expanded.adapter.bias is None

    def test_unknown_kind(self, rng):
        with pytest.raises(StateError):
            expand(ConvBlock.create(3, 4, 1, rng), "conv5x5")


class TestFuseHelpers:
    def test_fuse_conv_bn_example(self, float64):
        bn = BatchNormParams.identity(1, eps=0.0)
        bn.gamma.data[...] = 2.0
        bn.beta.data[...] = 1.0
        bn.running_mean[...] = 1.0
        bn.running_var[...] = 4.0
        w, b = fuse_conv_bn(np.full((1, 1, 1, 1), 3.0), np.array([5.0]), bn)
        np.testing.assert_array_equal(w.ravel(), [3.0])
        np.testing.assert_array_equal(b, [5.0])

    def test_fuse_conv_bn_scalar(self, float64):
        bn = BatchNormParams.identity(1, eps=0.0)
        bn.gamma.data[...] = 3.0
        bn.beta.data[...] = 1.0
        bn.running_mean[...] = 0.5
        bn.running_var[...] = 4.0
        w, b = fuse_conv_bn(np.full((1, 1, 1, 1), 2.0), np.array([0.0]), bn)
        assert (w.item(), b.item()) == (3.0, 0.25)
        x = Tensor(np.ones((1, 1, 1, 1)))
        unfused = batchnorm2d(conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.0])),
                              bn.gamma, bn.beta, bn.running_mean, bn.running_var, eps=0.0)
        fused = conv2d(x, Tensor(w), Tensor(b))
        assert unfused.data.item() == fused.data.item() == 3.25

    def test_pad_1x1_to_3x3(self):
        padded = pad_1x1_to_3x3(np.full((2, 1, 1, 1), 7.0))
        assert padded.shape == (2, 1, 3, 3)
        assert padded[:, :, 1, 1].tolist() == [[7.0], [7.0]]
        assert np.count_nonzero(padded) == 2

    def test_fuse_requires_adapter(self, rng):
        with pytest.raises(StateError):
            fuse(ConvBlock.create(3, 4, 1, rng))

    def test_stride_mismatch_rejected(self, rng):
        expanded = expand(ConvBlock.create(3, 4, 2, rng))
        expanded.adapter.stride = 1
        with pytest.raises(StructuralError):
            fuse(expanded)
