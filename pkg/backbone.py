"""
特徴抽出器と拡張可能な全結合分類器
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from constants import EngineConstants
from error_handler import ConfigurationError, ShapeError, StateError
from reparam import AdapterKind, ConvBlock, expand, fuse
from tensor_core import Tensor, get_dtype, global_avg_pool, linear, no_grad, relu

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    """特徴抽出器の構成（段ごとのチャネル幅とストライド）"""

    input_shape: Tuple[int, int, int] = (3, 16, 16)
    channels: Tuple[int, ...] = (16, 32, 64)
    strides: Tuple[int, ...] = (1, 2, 2)
    use_bn: bool = True
    bn_eps: float = EngineConstants.BN_EPS
    bn_momentum: float = EngineConstants.BN_MOMENTUM

    def __post_init__(self):
        if len(self.channels) == 0 or len(self.channels) != len(self.strides):
            raise ConfigurationError(
                f"channels {self.channels} と strides {self.strides} の段数が一致しません")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigurationError("channels と strides は正の整数である必要があります")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigurationError(f"input_shape は (C, H, W) の正の整数です: {self.input_shape}")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


class Backbone:
    """3x3 conv(+BN)+relu ブロックの列と大域平均プーリング"""

    def __init__(self, config: BackboneConfig, blocks: List[ConvBlock]):
        self.config = config
        self.blocks = blocks

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator) -> "Backbone":
        blocks = []
        in_channels = config.input_shape[0]
        for out_channels, stride in zip(config.channels, config.strides):
            blocks.append(ConvBlock.create(in_channels, out_channels, stride, rng,
                                           with_bn=config.use_bn, bn_eps=config.bn_eps,
                                           bn_momentum=config.bn_momentum))
            in_channels = out_channels
        return cls(config, blocks)

    # ------------------------------------------------------------------
    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def is_expanded(self) -> bool:
        return any(block.is_expanded for block in self.blocks)

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """r = pool(relu(block_L(... relu(block_1(x)))))"""
        if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(f"features: 入力 {x.shape} は [N, {', '.join(map(str, self.config.input_shape))}] である必要があります")
        out = x
        for block in self.blocks:
            out = relu(block.forward(out, training))
        return global_avg_pool(out)

    def expand_all(self, kind: AdapterKind = AdapterKind.CONV1X1, with_bias: bool = True,
                   train_adapter_bn_stats: bool = True) -> "Backbone":
        blocks = [expand(block, kind, with_bias, train_adapter_bn_stats) for block in self.blocks]
        return Backbone(self.config, blocks)

    def fuse_all(self) -> "Backbone":
        if not all(block.is_expanded for block in self.blocks):
            raise StateError("未拡張のブロックを含むバックボーンは融合できません")
        return Backbone(self.config, [fuse(block) for block in self.blocks])

    def copy(self) -> "Backbone":
        return Backbone(self.config, [block.copy() for block in self.blocks])

    def freeze(self) -> None:
        for block in self.blocks:
            block.freeze()

    def set_trainable(self, trainable: bool) -> None:
        """主枝を含む全パラメータの学習可否（ファインチューニング用）"""
        for block in self.blocks:
            block.set_main_trainable(trainable)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"blocks.{i}.{name}", tensor)
                for i, block in enumerate(self.blocks) for name, tensor in block.parameters()]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"blocks.{i}.{name}", array)
                for i, block in enumerate(self.blocks) for name, array in block.buffers()]

    def main_state(self) -> List[Tuple[str, np.ndarray]]:
        """主枝の重み・バイアス・BN パラメータと running 統計"""
        state = []
        for i, block in enumerate(self.blocks):
            state.extend((f"blocks.{i}.{name}", tensor.data) for name, tensor in block.main_parameters())
            if block.main_bn is not None:
                state.extend((f"blocks.{i}.main_bn.{name}", array) for name, array in block.main_bn.buffers())
        return state

    def trainable_parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.parameters() if tensor.requires_grad]

    def fingerprint(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(f"blocks.{i}.{name}", shape)
                for i, block in enumerate(self.blocks) for name, shape in block.fingerprint()]

    def param_count(self) -> int:
        return sum(block.param_count() for block in self.blocks)


@dataclass
class Classifier:
    """全結合分類器 s = W·r + b（行 k がクラス k に対応）"""

    weight: Tensor
    bias: Tensor
    frozen_rows: int = 0

    @classmethod
    def create(cls, feature_dim: int, num_classes: int, rng: np.random.Generator) -> "Classifier":
        empty = cls(weight=Tensor(np.zeros((0, feature_dim), dtype=get_dtype()), requires_grad=True),
                    bias=Tensor(np.zeros(0, dtype=get_dtype()), requires_grad=True))
        return extend_classifier(empty, num_classes, rng)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def logits(self, r: Tensor) -> Tensor:
        if r.data.ndim != 2 or r.shape[1] != self.feature_dim:
            raise ShapeError(f"logits: 特徴 {r.shape} と分類器 {self.weight.shape} の次元が一致しません")
        return linear(r, self.weight, self.bias)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def copy(self) -> "Classifier":
        return Classifier(self.weight.copy(), self.bias.copy(), self.frozen_rows)


def extend_classifier(classifier: Classifier, k_new: int, rng: np.random.Generator) -> Classifier:
    """
    分類器に k_new 行を追加した新しい分類器を返す

    新しい行は ±1e-2 の一様乱数、新しいバイアスは 0。既存行はビット単位で保持される。
    """
    if k_new <= 0:
        raise ConfigurationError(f"追加クラス数は 1 以上である必要があります: {k_new}")
    dtype = classifier.weight.dtype
    bound = EngineConstants.CLASSIFIER_INIT_RANGE
    new_rows = rng.uniform(-bound, bound, size=(k_new, classifier.feature_dim)).astype(dtype)
    weight = np.concatenate([classifier.weight.data, new_rows], axis=0)
    bias = np.concatenate([classifier.bias.data, np.zeros(k_new, dtype=dtype)])
    extended = Classifier(
        weight=Tensor(weight, requires_grad=True, dtype=dtype),
        bias=Tensor(bias, requires_grad=True, dtype=dtype),
        frozen_rows=classifier.num_classes,
    )
    logger.debug("extend_classifier: %d -> %d クラス", classifier.num_classes, extended.num_classes)
    return extended


@dataclass
class IncrementalModel:
    """バックボーンと分類器の組"""

    backbone: Backbone
    classifier: Classifier
    phase: int = 0

    @classmethod
    def create(cls, config: BackboneConfig, num_classes: int, rng: np.random.Generator) -> "IncrementalModel":
        backbone = Backbone.create(config, rng)
        classifier = Classifier.create(backbone.feature_dim, num_classes, rng)
        return cls(backbone, classifier)

    def forward(self, x: Tensor, training: bool = False) -> Tuple[Tensor, Tensor]:
        """(特徴, ロジット)"""
        r = self.backbone.features(x, training)
        return r, self.classifier.logits(r)

    def predict(self, images: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
        """評価モードでの top-1 予測"""
        batch_size = batch_size or EngineConstants.EVAL_BATCH_SIZE
        predictions = np.empty(len(images), dtype=np.int64)
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunk = Tensor(images[start:start + batch_size])
                _, logits = self.forward(chunk, training=False)
                predictions[start:start + batch_size] = np.argmax(logits.data, axis=1)
        return predictions

    def trainable_parameters(self) -> List[Tensor]:
        params = self.backbone.trainable_parameters()
        params.extend(tensor for _, tensor in self.classifier.parameters() if tensor.requires_grad)
        return params

    def fingerprint(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return self.backbone.fingerprint()

    def copy(self) -> "IncrementalModel":
        return IncrementalModel(self.backbone.copy(), self.classifier.copy(), self.phase)
