"""
損失関数モジュール
マスク付き交差エントロピー、特徴蒸留、プロトタイプ損失とその重み付き和
"""

from dataclasses import dataclass

import numpy as np

from error_handler import ConfigurationError, ShapeError
from tensor_core import (Tensor, add, check_labels, mean, row_norm, scale, softmax_cross_entropy,
                         square, sub, take_rows, tensor_sum, zero_scalar)


@dataclass(frozen=True)
class LossWeights:
    """蒸留損失とプロトタイプ損失の重み"""
    lambda_kd: float = 10.0
    gamma_proto: float = 10.0

    def __post_init__(self):
        if self.lambda_kd < 0 or self.gamma_proto < 0:
            raise ConfigurationError(
                f"損失の重みは非負である必要があります: lambda_kd={self.lambda_kd}, gamma_proto={self.gamma_proto}")


def _indices(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"マスク {mask.shape} とバッチサイズ {n} が一致しません")
    return np.flatnonzero(mask)


def masked_ce(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """マスクで選ばれたサンプルのみの平均 CE（空なら勾配なしの 0）"""
    labels = check_labels(labels, logits.shape[1])
    index = _indices(mask, logits.shape[0])
    if index.size == 0:
        return zero_scalar()
    if index.size == logits.shape[0]:
        return softmax_cross_entropy(logits, labels)
    return softmax_cross_entropy(take_rows(logits, index), labels[index])


def kd_loss(r_new: Tensor, r_old: Tensor, mask: np.ndarray, squared: bool = True) -> Tensor:
    """
    マスク内サンプルの特徴距離の平均

    squared=True で ‖r_new − r_old‖²、False でユークリッド距離そのもの。
    教師側 r_old には勾配を流さない。
    """
    if r_new.shape != r_old.shape or r_new.data.ndim != 2:
        raise ShapeError(f"kd_loss: 生徒特徴 {r_new.shape} と教師特徴 {r_old.shape} が一致しません")
    index = _indices(mask, r_new.shape[0])
    if index.size == 0:
        return zero_scalar()
    diff = sub(take_rows(r_new, index), r_old.data[index])
    distance = tensor_sum(square(diff), axis=1) if squared else row_norm(diff)
    return mean(distance)


def proto_loss(classifier, p_batch: Tensor, y_batch: np.ndarray) -> Tensor:
    """オーバーサンプリングしたプロトタイプに対する分類器の CE"""
    return softmax_cross_entropy(classifier.logits(p_batch.detach()), y_batch)


def total_loss(ce: Tensor, kd: Tensor, proto: Tensor, weights: LossWeights) -> Tensor:
    """ce + λ·kd + γ·proto"""
    return add(add(ce, scale(kd, weights.lambda_kd)), scale(proto, weights.gamma_proto))
