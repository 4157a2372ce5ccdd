"""
プロトタイプメモリモジュール
クラスごとの特徴重心、プロトタイプのオーバーサンプリング、
旧クラスとの類似度による CE / KD 振り分けマスクを担当
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np

from error_handler import ConfigurationError, DataError, ShapeError, StateError
from tensor_core import Tensor, get_dtype

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prototype:
    """1 クラス分の特徴重心"""
    class_id: int
    centroid: np.ndarray
    phase: int


class PrototypeStore:
    """クラス ID → プロトタイプ（1 クラス 1 個、追記のみ）"""

    def __init__(self):
        self._prototypes: Dict[int, Prototype] = {}

    def __len__(self) -> int:
        return len(self._prototypes)

    def __contains__(self, class_id: int) -> bool:
        return int(class_id) in self._prototypes

    @property
    def dim(self) -> int:
        if not self._prototypes:
            raise StateError("プロトタイプが空です")
        return next(iter(self._prototypes.values())).centroid.shape[0]

    @property
    def class_ids(self) -> List[int]:
        return sorted(self._prototypes)

    def add(self, class_id: int, centroid: np.ndarray, phase: int) -> None:
        class_id = int(class_id)
        if class_id in self._prototypes:
            raise StateError(f"クラス {class_id} のプロトタイプは既に登録されています")
        centroid = np.array(centroid, copy=True)
        if self._prototypes and centroid.shape != (self.dim,):
            raise ShapeError(f"プロトタイプ次元 {centroid.shape} が既存の {self.dim} と一致しません")
        centroid.setflags(write=False)
        self._prototypes[class_id] = Prototype(class_id, centroid, int(phase))

    def get(self, class_id: int) -> Prototype:
        return self._prototypes[int(class_id)]

    def matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        """(クラス ID 昇順の重心行列 [C, D], クラス ID [C])"""
        ids = np.array(self.class_ids, dtype=np.int64)
        if ids.size == 0:
            return np.zeros((0, 0), dtype=get_dtype()), ids
        return np.stack([self._prototypes[int(c)].centroid for c in ids]), ids

    def items(self) -> Iterable[Prototype]:
        return (self._prototypes[c] for c in self.class_ids)


@dataclass
class SelectionMasks:
    """CE / KD の排他的な振り分け"""
    ce_mask: np.ndarray
    kd_mask: np.ndarray
    scores: np.ndarray

    @property
    def is_partition(self) -> bool:
        return bool(np.all(self.ce_mask ^ self.kd_mask))


def compute_prototypes(features: np.ndarray, labels: np.ndarray, new_classes: Iterable[int],
                       store: PrototypeStore, phase: int) -> PrototypeStore:
    """new_classes の各クラスについて特徴の平均を登録する"""
    features = features.data if isinstance(features, Tensor) else np.asarray(features)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeError(f"compute_prototypes: 特徴 {features.shape} とラベル {labels.shape} が不一致です")
    for class_id in sorted(int(c) for c in new_classes):
        selected = features[labels == class_id]
        if selected.shape[0] == 0:
            raise DataError(f"クラス {class_id} のサンプルが 0 件のためプロトタイプを計算できません")
        store.add(class_id, selected.mean(axis=0), phase)
    logger.debug("compute_prototypes: phase=%d 登録数=%d", phase, len(store))
    return store


def oversample(store: PrototypeStore, batch_size: int, rng: np.random.Generator) -> Tuple[Tensor, np.ndarray]:
    """プロトタイプを一様・復元抽出でバッチサイズまで複製（ノイズなし）"""
    if len(store) == 0:
        raise StateError("プロトタイプが空のためオーバーサンプリングできません")
    if batch_size < 1:
        raise ConfigurationError(f"バッチサイズは 1 以上である必要があります: {batch_size}")
    centroids, ids = store.matrix()
    picks = rng.integers(0, len(ids), size=batch_size)
    return Tensor(centroids[picks]), ids[picks]


def cosine_scores(features, store: PrototypeStore) -> np.ndarray:
    """各サンプルについて、旧プロトタイプとのコサイン類似度の最大値"""
    r = features.data if isinstance(features, Tensor) else np.asarray(features)
    if len(store) == 0:
        raise StateError("プロトタイプが空のため類似度を計算できません")
    centroids, _ = store.matrix()
    if r.ndim != 2 or r.shape[1] != centroids.shape[1]:
        raise ShapeError(f"cosine_scores: 特徴 {r.shape} とプロトタイプ次元 {centroids.shape[1]} が不一致です")
    r64 = r.astype(np.float64)
    p64 = centroids.astype(np.float64)
    r_norm = np.linalg.norm(r64, axis=1, keepdims=True)
    p_norm = np.linalg.norm(p64, axis=1, keepdims=True)
    # ゼロベクトルの類似度は 0
    r_unit = np.divide(r64, r_norm, out=np.zeros_like(r64), where=r_norm > 0)
    p_unit = np.divide(p64, p_norm, out=np.zeros_like(p64), where=p_norm > 0)
    scores = (r_unit @ p_unit.T).max(axis=1) if r.shape[0] else np.zeros(0)
    return np.clip(scores, -1.0, 1.0)


def partition(scores: np.ndarray, sigma: float) -> SelectionMasks:
    """score > σ は KD、それ以外は CE（σ = −1 のみ全サンプル KD）"""
    if not -1.0 <= sigma <= 1.0:
        raise ConfigurationError(f"σ は [-1, 1] の範囲で指定してください: {sigma}")
    scores = np.asarray(scores, dtype=np.float64)
    kd_mask = np.ones(scores.shape, dtype=bool) if sigma == -1.0 else scores > sigma
    return SelectionMasks(ce_mask=~kd_mask, kd_mask=kd_mask, scores=scores)


def similarity_stats(scores: np.ndarray, labels: np.ndarray) -> Dict[int, Dict[str, float]]:
    """新クラスごとの類似度の平均と標準偏差"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    stats = {}
    for class_id in np.unique(labels):
        values = scores[labels == class_id]
        stats[int(class_id)] = {
            "mean": float(values.mean()),
            "std": float(values.std()),
            "count": int(values.size),
        }
    return stats
