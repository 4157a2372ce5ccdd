"""
構造再パラメータ化モジュール
凍結した畳み込みブロックへの残差アダプタ追加（拡張）と、
アダプタを主枝カーネルへ無損失に畳み込む融合を担当
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from constants import EngineConstants
from error_handler import NumericError, ShapeError, StateError, StructuralError
from tensor_core import Tensor, add, batchnorm2d, conv2d, get_dtype

logger = logging.getLogger(__name__)


class AdapterKind(str, Enum):
    """アダプタの構造"""
    CONV1X1 = "conv1x1"
    CONV1X1_BN = "conv1x1_bn"
    CONV3X3 = "conv3x3"

    @property
    def kernel_size(self) -> int:
        return 3 if self is AdapterKind.CONV3X3 else 1

    @property
    def has_bn(self) -> bool:
        return self is AdapterKind.CONV1X1_BN

    @classmethod
    def parse(cls, value) -> "AdapterKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as exc:
            choices = ", ".join(kind.value for kind in cls)
            raise StateError(f"未知のアダプタ種別です: {value} (選択肢: {choices})") from exc


@dataclass
class BatchNormParams:
    """BatchNorm のパラメータと running 統計"""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = EngineConstants.BN_EPS
    momentum: float = EngineConstants.BN_MOMENTUM
    frozen_stats: bool = False

    @classmethod
    def identity(cls, channels: int, eps: float = EngineConstants.BN_EPS,
                 momentum: float = EngineConstants.BN_MOMENTUM) -> "BatchNormParams":
        """γ=1, β=0, μ=0, v=1"""
        dtype = get_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @classmethod
    def neutral(cls, channels: int, eps: float = EngineConstants.BN_EPS,
                momentum: float = EngineConstants.BN_MOMENTUM) -> "BatchNormParams":
        """推論時に入力をそのまま通す BN（γ = sqrt(1+eps) なので γ/sqrt(v+eps) = 1）"""
        bn = cls.identity(channels, eps, momentum)
        bn.gamma.data[...] = np.sqrt(bn.running_var + eps)
        return bn

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        use_batch_stats = training and not self.frozen_stats
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           eps=self.eps, training=use_batch_stats, momentum=self.momentum)

    def set_trainable(self, trainable: bool) -> None:
        self.gamma.requires_grad = trainable
        self.beta.requires_grad = trainable

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            eps=self.eps,
            momentum=self.momentum,
            frozen_stats=self.frozen_stats,
        )


@dataclass
class Adapter:
    """主枝に並列な残差アダプタ"""

    kind: AdapterKind
    weight: Tensor
    bias: Optional[Tensor] = None
    bn: Optional[BatchNormParams] = None
    stride: int = 1
    padding: int = 0

    def forward(self, x: Tensor, training: bool) -> Tensor:
        out = conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.bn is not None:
            out = self.bn.forward(out, training)
        return out

    def parameters(self) -> List[Tuple[str, Tensor]]:
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        if self.bn is not None:
            params.extend((f"bn.{name}", tensor) for name, tensor in self.bn.parameters())
        return params

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        if self.bn is None:
            return []
        return [(f"bn.{name}", array) for name, array in self.bn.buffers()]

    def copy(self) -> "Adapter":
        return Adapter(
            kind=self.kind,
            weight=self.weight.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            bn=None if self.bn is None else self.bn.copy(),
            stride=self.stride,
            padding=self.padding,
        )


@dataclass
class ConvBlock:
    """凍結可能な 3x3 主枝 conv(+BN) と任意の学習可能アダプタ"""

    main_weight: Tensor
    main_bias: Tensor
    main_bn: Optional[BatchNormParams] = None
    adapter: Optional[Adapter] = None
    frozen_main: bool = False
    stride: int = 1
    padding: int = 1

    @classmethod
    def create(cls, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator,
               with_bn: bool = True, bn_eps: float = EngineConstants.BN_EPS,
               bn_momentum: float = EngineConstants.BN_MOMENTUM) -> "ConvBlock":
        """He 正規分布で初期化した 3x3 ブロック"""
        dtype = get_dtype()
        fan_in = in_channels * 9
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, 3, 3))
        return cls(
            main_weight=Tensor(weight.astype(dtype), requires_grad=True),
            main_bias=Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True),
            main_bn=BatchNormParams.identity(out_channels, bn_eps, bn_momentum) if with_bn else None,
            stride=stride,
            padding=1,
        )

    # ------------------------------------------------------------------
    @property
    def in_channels(self) -> int:
        return self.main_weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.main_weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.main_weight.shape[2]

    @property
    def is_expanded(self) -> bool:
        return self.adapter is not None

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """主枝(+BN) と、存在すればアダプタ出力の和"""
        out = conv2d(x, self.main_weight, self.main_bias, stride=self.stride, padding=self.padding)
        if self.main_bn is not None:
            # 凍結中の主枝 BN は running 統計のみを使う
            out = self.main_bn.forward(out, training and not self.frozen_main)
        if self.adapter is not None:
            out = add(out, self.adapter.forward(x, training))
        return out

    def main_parameters(self) -> List[Tuple[str, Tensor]]:
        params = [("main_weight", self.main_weight), ("main_bias", self.main_bias)]
        if self.main_bn is not None:
            params.extend((f"main_bn.{name}", tensor) for name, tensor in self.main_bn.parameters())
        return params

    def parameters(self) -> List[Tuple[str, Tensor]]:
        params = self.main_parameters()
        if self.adapter is not None:
            params.extend((f"adapter.{name}", tensor) for name, tensor in self.adapter.parameters())
        return params

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        buffers = []
        if self.main_bn is not None:
            buffers.extend((f"main_bn.{name}", array) for name, array in self.main_bn.buffers())
        if self.adapter is not None:
            buffers.extend((f"adapter.{name}", array) for name, array in self.adapter.buffers())
        return buffers

    def trainable_parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.parameters() if tensor.requires_grad]

    def param_count(self) -> int:
        return sum(tensor.size for _, tensor in self.parameters())

    def fingerprint(self) -> List[Tuple[str, Tuple[int, ...]]]:
        entries = [(name, tensor.shape) for name, tensor in self.parameters()]
        entries.extend((name, array.shape) for name, array in self.buffers())
        return entries

    def set_main_trainable(self, trainable: bool) -> None:
        for _, tensor in self.main_parameters():
            tensor.requires_grad = trainable
        if self.main_bn is not None:
            self.main_bn.frozen_stats = not trainable
        self.frozen_main = not trainable

    def freeze(self) -> None:
        """教師用にすべて凍結"""
        self.set_main_trainable(False)
        if self.adapter is not None:
            for _, tensor in self.adapter.parameters():
                tensor.requires_grad = False
            if self.adapter.bn is not None:
                self.adapter.bn.frozen_stats = True

    def copy(self) -> "ConvBlock":
        return ConvBlock(
            main_weight=self.main_weight.copy(),
            main_bias=self.main_bias.copy(),
            main_bn=None if self.main_bn is None else self.main_bn.copy(),
            adapter=None if self.adapter is None else self.adapter.copy(),
            frozen_main=self.frozen_main,
            stride=self.stride,
            padding=self.padding,
        )


# ----------------------------------------------------------------------
# 拡張
# ----------------------------------------------------------------------
def adapter_padding(block: ConvBlock, kind: AdapterKind) -> int:
    """両枝の出力空間サイズが一致するアダプタのパディング"""
    return block.padding - (block.kernel_size - kind.kernel_size) // 2


def expand(block: ConvBlock, kind: AdapterKind = AdapterKind.CONV1X1,
           with_bias: bool = True, train_adapter_bn_stats: bool = True) -> ConvBlock:
    """
    主枝を凍結し、ゼロ初期化アダプタを並列に追加した新しいブロックを返す

    ゼロ初期化なので拡張直後の forward は拡張前と完全に一致する。
    """
    if block.adapter is not None:
        raise StateError("このブロックは既に拡張されています（二重拡張）")
    kind = AdapterKind.parse(kind)
    padding = adapter_padding(block, kind)
    if padding < 0:
        raise StructuralError(f"アダプタのパディングが負になります: main padding={block.padding}, kind={kind.value}")
    dtype = get_dtype()
    k = kind.kernel_size
    weight = Tensor(np.zeros((block.out_channels, block.in_channels, k, k), dtype=dtype), requires_grad=True)
    bias = None
    bn = None
    if kind.has_bn:
        eps = block.main_bn.eps if block.main_bn is not None else EngineConstants.BN_EPS
        momentum = block.main_bn.momentum if block.main_bn is not None else EngineConstants.BN_MOMENTUM
        bn = BatchNormParams.identity(block.out_channels, eps, momentum)
        bn.frozen_stats = not train_adapter_bn_stats
    elif with_bias:
        bias = Tensor(np.zeros(block.out_channels, dtype=dtype), requires_grad=True)

    expanded = block.copy()
    expanded.set_main_trainable(False)
    expanded.adapter = Adapter(kind=kind, weight=weight, bias=bias, bn=bn,
                               stride=block.stride, padding=padding)
    return expanded


# ----------------------------------------------------------------------
# 融合
# ----------------------------------------------------------------------
def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def fuse_conv_bn(weight, bias, bn: BatchNormParams, eps: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    BN(conv(w, b)) ≡ conv(w', b') となる (w', b') を返す

    s_o = γ_o / sqrt(v_o + eps), w'_o = s_o·w_o, b'_o = β_o + s_o·(b_o − μ_o)
    """
    w = _as_array(weight)
    b = _as_array(bias)
    eps = bn.eps if eps is None else eps
    if w.shape[0] != bn.channels or b.shape != (bn.channels,):
        raise ShapeError(f"fuse_conv_bn: 重み {w.shape} / バイアス {b.shape} と BN チャネル {bn.channels} が不一致です")
    variance = bn.running_var + eps
    if np.any(variance <= 0):
        raise NumericError("fuse_conv_bn: v + eps が正でないチャネルがあります")
    scale = bn.gamma.data / np.sqrt(variance)
    fused_w = w * scale.reshape(-1, 1, 1, 1)
    fused_b = bn.beta.data + scale * (b - bn.running_mean)
    return fused_w.astype(w.dtype), fused_b.astype(w.dtype)


def pad_kernel(weight, size: int) -> np.ndarray:
    """カーネルを中心に置いて size x size にゼロ埋め"""
    w = _as_array(weight)
    k = w.shape[2]
    if k == size:
        return w.copy()
    if k > size or (size - k) % 2:
        raise StructuralError(f"カーネル {k}x{k} は {size}x{size} の中心に置けません")
    offset = (size - k) // 2
    padded = np.zeros(w.shape[:2] + (size, size), dtype=w.dtype)
    padded[:, :, offset:offset + k, offset:offset + k] = w
    return padded


def pad_1x1_to_3x3(weight) -> np.ndarray:
    """1x1 カーネルを 3x3 の中心 [1,1] に配置"""
    w = _as_array(weight)
    if w.shape[2:] != (1, 1):
        raise ShapeError(f"pad_1x1_to_3x3: 1x1 カーネルではありません: {w.shape}")
    return pad_kernel(w, 3)


def fuse(block: ConvBlock) -> ConvBlock:
    """
    アダプタを主枝へ畳み込み、拡張前と同じ構造のブロックを返す

    BN は各枝で fuse_conv_bn により畳み込み、1x1 アダプタは 3x3 へ
    ゼロ埋めして主枝カーネルに加算する。主枝 BN は中立 BN に置き換える。
    """
    adapter = block.adapter
    if adapter is None:
        raise StateError("アダプタが無いブロックは融合できません")
    expected_padding = adapter_padding(block, adapter.kind)
    if adapter.stride != block.stride or adapter.padding != expected_padding:
        raise StructuralError(
            f"主枝 (stride={block.stride}, padding={block.padding}) とアダプタ "
            f"(stride={adapter.stride}, padding={adapter.padding}) の構造が一致しません")

    dtype = block.main_weight.dtype
    if block.main_bn is not None:
        main_w, main_b = fuse_conv_bn(block.main_weight, block.main_bias, block.main_bn)
    else:
        main_w, main_b = block.main_weight.data.copy(), block.main_bias.data.copy()

    adapter_bias = adapter.bias.data if adapter.bias is not None else np.zeros(block.out_channels, dtype=dtype)
    if adapter.bn is not None:
        side_w, side_b = fuse_conv_bn(adapter.weight, adapter_bias, adapter.bn)
    else:
        side_w, side_b = adapter.weight.data, adapter_bias
    side_w = pad_kernel(side_w, block.kernel_size)

    fused = ConvBlock(
        main_weight=Tensor(main_w + side_w, requires_grad=True, dtype=dtype),
        main_bias=Tensor(main_b + side_b, requires_grad=True, dtype=dtype),
        main_bn=None,
        stride=block.stride,
        padding=block.padding,
    )
    if block.main_bn is not None:
        fused.main_bn = BatchNormParams.neutral(block.out_channels, block.main_bn.eps, block.main_bn.momentum)
    logger.debug("fuse: kind=%s params=%d", adapter.kind.value, fused.param_count())
    return fused
