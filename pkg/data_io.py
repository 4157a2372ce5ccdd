"""
データ入出力モジュール
CIFAR-100 バイナリの解析、合成データ生成、クラス増分分割とフェーズ別ローダーを提供
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from constants import DataConstants
from error_handler import ConfigurationError, DataError, ExemplarAccessError, ParseError
from tensor_core import get_dtype

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledImage:
    """画素値 [0, 1] の C×H×W 画像と細ラベル（粗ラベルは保持のみ）"""
    pixels: np.ndarray
    fine_label: int
    coarse_label: int = 0


@dataclass
class ImageDataset:
    """画像配列 [M, C, H, W] とラベル [M]"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    coarse_labels: Optional[np.ndarray] = None
    original_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"画像 {self.images.shape} とラベル {self.labels.shape} の件数が一致しません")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"ラベルがクラス数 {self.num_classes} の範囲外です")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ----------------------------------------------------------------------
# CIFAR-100 バイナリ
# ----------------------------------------------------------------------
def _parse_arrays(data: bytes) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    record = DataConstants.CIFAR_RECORD_BYTES
    if len(data) % record:
        raise ParseError(
            f"CIFAR-100 レコードが途中で切れています (長さ {len(data)} は {record} の倍数ではありません)",
            offset=(len(data) // record) * record)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    coarse = raw[:, 0].astype(np.int64)
    fine = raw[:, 1].astype(np.int64)
    bad = np.flatnonzero((fine >= DataConstants.CIFAR_FINE_CLASSES) | (coarse >= DataConstants.CIFAR_COARSE_CLASSES))
    if bad.size:
        raise ParseError(f"ラベル値が範囲外のレコードがあります (record={bad[0]})", offset=int(bad[0]) * record)
    pixels = raw[:, 2:].reshape((-1,) + DataConstants.CIFAR_IMAGE_SHAPE)
    return pixels, fine, coarse


def parse_cifar100(data: bytes) -> List[LabeledImage]:
    """
    CIFAR-100 バイナリを解析

    各レコードは 粗ラベル 1 byte, 細ラベル 1 byte, R/G/B 各 1024 byte（行優先）。
    画素値 p は p/255.0 に変換する。
    """
    pixels, fine, coarse = _parse_arrays(data)
    scaled = pixels.astype(np.float64) / 255.0
    return [LabeledImage(scaled[i], int(fine[i]), int(coarse[i])) for i in range(len(fine))]


def serialize_cifar100(images: Sequence[LabeledImage]) -> bytes:
    """parse_cifar100 の逆変換"""
    chunks = []
    for image in images:
        if tuple(image.pixels.shape) != DataConstants.CIFAR_IMAGE_SHAPE:
            raise DataError(f"CIFAR 画像の形状ではありません: {image.pixels.shape}")
        header = np.array([image.coarse_label, image.fine_label], dtype=np.uint8)
        body = np.rint(np.asarray(image.pixels, dtype=np.float64) * 255.0).astype(np.uint8)
        chunks.append(header.tobytes() + body.tobytes())
    return b"".join(chunks)


def validate_data_file(path: str) -> str:
    """データファイルの存在・権限・サイズの検証"""
    normalized = os.path.normpath(path)
    if not os.path.isfile(normalized):
        raise FileNotFoundError(f"データファイルが存在しません: {normalized}")
    if not os.access(normalized, os.R_OK):
        raise PermissionError(f"データファイルの読み取り権限がありません: {normalized}")
    size = os.path.getsize(normalized)
    if size > DataConstants.MAX_DATA_FILE_BYTES:
        raise DataError(f"データファイルが大きすぎます: {size} bytes")
    return normalized


def load_cifar100(directory: str, split: str = "train") -> ImageDataset:
    """directory/{train,test}.bin を読み込む"""
    name = {"train": DataConstants.CIFAR_TRAIN_FILE, "test": DataConstants.CIFAR_TEST_FILE}.get(split)
    if name is None:
        raise ConfigurationError(f"未知の分割です: {split}")
    path = validate_data_file(os.path.join(directory, name))
    with open(path, "rb") as handle:
        pixels, fine, coarse = _parse_arrays(handle.read())
    logger.info("CIFAR-100 %s: %d 件を読み込みました (%s)", split, len(fine), path)
    images = (pixels.astype(np.float64) / 255.0).astype(get_dtype())
    return ImageDataset(images, fine, DataConstants.CIFAR_FINE_CLASSES, coarse_labels=coarse)


# ----------------------------------------------------------------------
# 合成データ
# ----------------------------------------------------------------------
_SPLIT_STREAMS = {"train": 1, "test": 2}


def _class_templates(classes: int, shape: Tuple[int, int, int], seed: int) -> np.ndarray:
    """クラスごとのガウス塊 + 縞模様テンプレート"""
    channels, height, width = shape
    rng = np.random.default_rng([seed, 0])
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    templates = np.empty((classes,) + shape)
    for c in range(classes):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        width_sq = rng.uniform(0.02, 0.06)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width_sq))
        fy, fx = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 * (1 + np.sin(2 * np.pi * (fy * yy + fx * xx) + phase))
        blob_weight = rng.uniform(0.3, 1.0, size=channels)
        stripe_weight = rng.uniform(0.0, 0.6, size=channels)
        templates[c] = (blob_weight[:, None, None] * blob + stripe_weight[:, None, None] * stripes) / 1.6
    return templates


def make_synthetic(classes: int, per_class: int, size: Tuple[int, int, int] = (3, 16, 16),
                   seed: int = 0, split: str = "train", noise: float = 0.15) -> ImageDataset:
    """シード固定の合成画像データセット（テンプレートは split 間で共通）"""
    if classes < 1 or per_class < 1:
        raise ConfigurationError(f"classes と per_class は 1 以上です: {classes}, {per_class}")
    if split not in _SPLIT_STREAMS:
        raise ConfigurationError(f"未知の分割です: {split}")
    shape = tuple(int(s) for s in size)
    templates = _class_templates(classes, shape, seed)
    rng = np.random.default_rng([seed, _SPLIT_STREAMS[split]])
    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels] + rng.normal(0.0, noise, size=(labels.size,) + shape)
    order = rng.permutation(labels.size)
    images = np.clip(images[order], 0.0, 1.0).astype(get_dtype())
    return ImageDataset(images, labels[order], classes)


# ----------------------------------------------------------------------
# クラス増分分割
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class IncrementalSplit:
    """
    クラス増分分割

    class_order[i] はモデル内クラス ID i に対応するデータセットのラベル。
    phase_classes[n-1] はフェーズ n のモデル内クラス ID。
    """
    class_order: Tuple[int, ...]
    base: int
    phases: int
    seed: int
    phase_classes: Tuple[Tuple[int, ...], ...] = field(default=())

    @property
    def num_phases(self) -> int:
        return len(self.phase_classes)

    @property
    def label_map(self) -> Dict[int, int]:
        return {label: i for i, label in enumerate(self.class_order)}

    def classes_for(self, phase: int) -> Tuple[int, ...]:
        if not 1 <= phase <= self.num_phases:
            raise ConfigurationError(f"フェーズ番号 {phase} は 1..{self.num_phases} の範囲外です")
        return self.phase_classes[phase - 1]

    def seen_classes(self, phase: int) -> Tuple[int, ...]:
        return tuple(c for n in range(1, phase + 1) for c in self.classes_for(n))

    def remap(self, dataset: ImageDataset) -> ImageDataset:
        """データセットのラベルをモデル内クラス ID に置き換える"""
        lookup = np.full(dataset.num_classes, -1, dtype=np.int64)
        lookup[list(self.class_order)] = np.arange(len(self.class_order))
        mapped = lookup[dataset.labels]
        if np.any(mapped < 0):
            raise DataError("分割に含まれないラベルがデータセットにあります")
        return ImageDataset(dataset.images, mapped, len(self.class_order),
                            coarse_labels=dataset.coarse_labels, original_labels=dataset.labels)


def build_split(dataset: Union[ImageDataset, int], base: int, phases: int, seed: int) -> IncrementalSplit:
    """シードでクラス順を並べ替え、base クラスと等分された phases 個の増分フェーズに割り当てる"""
    num_classes = dataset if isinstance(dataset, int) else dataset.num_classes
    if not 1 <= base <= num_classes:
        raise ConfigurationError(f"base={base} はクラス数 {num_classes} の範囲外です")
    if phases < 0:
        raise ConfigurationError(f"phases は 0 以上です: {phases}")
    remaining = num_classes - base
    if (phases == 0 and remaining) or (phases and remaining % phases):
        raise ConfigurationError(
            f"残り {remaining} クラスを {phases} フェーズに等分できません (クラス数 {num_classes}, base {base})")
    order = tuple(int(c) for c in np.random.default_rng(seed).permutation(num_classes))
    step = remaining // phases if phases else 0
    groups = [tuple(range(base))]
    groups.extend(tuple(range(base + k * step, base + (k + 1) * step)) for k in range(phases))
    split = IncrementalSplit(order, base, phases, seed, tuple(groups))
    logger.info("クラス増分分割: フェーズサイズ %s (seed=%d)", [len(g) for g in groups], seed)
    return split


class PhaseLoader:
    """
    フェーズ n の学習データのみを保持するローダー

    他フェーズのクラスは保持せず、要求されると ExemplarAccessError を送出する。
    """

    def __init__(self, dataset: ImageDataset, classes: Sequence[int], phase: int):
        self.phase = phase
        self.classes: Set[int] = {int(c) for c in classes}
        selected = np.flatnonzero(np.isin(dataset.labels, sorted(self.classes)))
        if selected.size == 0:
            raise DataError(f"フェーズ {phase} の学習データが空です")
        self._ids = selected
        self._images = dataset.images[selected]
        self._labels = dataset.labels[selected]
        self.touched_ids: Set[int] = set()

    def __len__(self) -> int:
        return int(self._ids.size)

    @property
    def sample_ids(self) -> np.ndarray:
        return self._ids

    def _check(self, class_ids) -> None:
        outside = sorted({int(c) for c in class_ids} - self.classes)
        if outside:
            raise ExemplarAccessError(
                f"フェーズ {self.phase} のローダーにフェーズ外クラス {outside} が要求されました")

    def request(self, class_ids) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """指定クラスの (ID, 画像, ラベル)"""
        self._check(class_ids)
        picks = np.isin(self._labels, list(class_ids))
        self.touched_ids.update(int(i) for i in self._ids[picks])
        return self._ids[picks], self._images[picks], self._labels[picks]

    def full(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.request(sorted(self.classes))

    def iter_batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """シャッフルしたミニバッチ (ID, 画像, ラベル)"""
        if batch_size < 1:
            raise ConfigurationError(f"バッチサイズは 1 以上です: {batch_size}")
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            picks = order[start:start + batch_size]
            ids = self._ids[picks]
            self.touched_ids.update(int(i) for i in ids)
            yield ids, self._images[picks], self._labels[picks]


def build_test_sets(dataset: ImageDataset, split: IncrementalSplit, phase: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """フェーズ 1..phase の各タスクのテスト集合 (画像, モデル内ラベル)"""
    test_sets = []
    for n in range(1, phase + 1):
        picks = np.flatnonzero(np.isin(dataset.labels, split.classes_for(n)))
        test_sets.append((dataset.images[picks], dataset.labels[picks]))
    return test_sets


# ----------------------------------------------------------------------
# 設定からのデータ準備
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DataConfig:
    """データセット選択と分割パラメータ"""
    source: str = "synthetic"
    root: str = ""
    classes: int = 10
    per_class: int = 200
    test_per_class: int = 50
    image_shape: Tuple[int, int, int] = (3, 16, 16)
    noise: float = 0.15
    base: int = 4
    phases: int = 3

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar100"):
            raise ConfigurationError(f"未知のデータソースです: {self.source}")
        if self.source == "cifar100" and tuple(self.image_shape) != DataConstants.CIFAR_IMAGE_SHAPE:
            raise ConfigurationError(f"CIFAR-100 の画像形状は {DataConstants.CIFAR_IMAGE_SHAPE} です")


def load_datasets(config: DataConfig, seed: int) -> Tuple[ImageDataset, ImageDataset]:
    """(学習, テスト) データセット"""
    if config.source == "cifar100":
        return load_cifar100(config.root, "train"), load_cifar100(config.root, "test")
    train = make_synthetic(config.classes, config.per_class, config.image_shape, seed, "train", config.noise)
    test = make_synthetic(config.classes, config.test_per_class, config.image_shape, seed, "test", config.noise)
    return train, test
