"""
学習プロトコルモジュール
第 1 フェーズの全教師あり学習と、増分フェーズの
拡張 → マスク付き同時学習 → 融合 → プロトタイプ更新 → 累積評価を担当
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from backbone import Backbone, BackboneConfig, Classifier, IncrementalModel, extend_classifier
from checkpoint_manager import save_checkpoint
from constants import EngineConstants
from data_io import (DataConfig, ImageDataset, IncrementalSplit, PhaseLoader, build_split,
                     build_test_sets, load_datasets)
from error_handler import ConfigurationError, DataError, ExemplarAccessError, StateError
from losses import LossWeights, kd_loss, masked_ce, proto_loss, total_loss
from memory_manager import MemoryManager
from metrics import MetricsLog
from progress_manager import ProgressManager
from protomem import PrototypeStore, compute_prototypes, cosine_scores, oversample, partition, similarity_stats
from reparam import AdapterKind
from tensor_core import Tensor, no_grad, precision, zero_scalar

logger = logging.getLogger(__name__)

INCREMENTAL_STAGES = 7


# ----------------------------------------------------------------------
# 設定
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class MethodToggles:
    """アブレーション用の手法スイッチ"""
    dsr: bool = True
    mbd: bool = True
    psm: bool = True
    proto: bool = True

    def __post_init__(self):
        if self.psm and not self.mbd:
            raise ConfigurationError("psm を有効にするには mbd も有効にする必要があります")

    @property
    def label(self) -> str:
        parts = [name for name in ("dsr", "mbd", "psm") if getattr(self, name)]
        if not parts:
            return "finetune" if not self.proto else "none"
        return "+".join(parts)


@dataclass(frozen=True)
class TrainConfig:
    """学習設定"""
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    betas: Tuple[float, float] = EngineConstants.ADAM_BETAS
    adam_eps: float = EngineConstants.ADAM_EPS
    lambda_kd: float = 10.0
    gamma_proto: float = 10.0
    sigma: float = 0.8
    adapter_kind: str = AdapterKind.CONV1X1.value
    adapter_bias: bool = True
    train_adapter_bn_stats: bool = True
    kd_squared: bool = True
    freeze_old_rows: bool = False
    score_schedule: str = "step"
    method: MethodToggles = MethodToggles()
    seed: int = 0
    precision: str = EngineConstants.DEFAULT_PRECISION
    audit_invariants: bool = False
    eval_workers: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError(f"epochs と batch_size は 1 以上です: {self.epochs}, {self.batch_size}")
        if self.lr <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigurationError("lr > 0, weight_decay >= 0, adam_eps > 0 が必要です")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError(f"betas は [0, 1) の範囲です: {self.betas}")
        if not -1.0 <= self.sigma <= 1.0:
            raise ConfigurationError(f"σ は [-1, 1] の範囲です: {self.sigma}")
        if self.score_schedule not in ("step", "epoch"):
            raise ConfigurationError(f"score_schedule は step / epoch のいずれかです: {self.score_schedule}")
        if self.precision not in EngineConstants.PRECISIONS:
            raise ConfigurationError(f"未知の精度です: {self.precision}")
        if self.eval_workers < 1:
            raise ConfigurationError(f"eval_workers は 1 以上です: {self.eval_workers}")
        try:
            AdapterKind.parse(self.adapter_kind)
        except StateError as exc:
            raise ConfigurationError(str(exc)) from exc
        LossWeights(self.lambda_kd, self.gamma_proto)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_kd, self.gamma_proto)


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    """一次・二次モーメントとステップ数"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float = 1e-3, betas: Tuple[float, float] = EngineConstants.ADAM_BETAS,
              eps: float = EngineConstants.ADAM_EPS, weight_decay: float = 0.0,
              frozen_rows: Optional[Sequence[int]] = None) -> AdamState:
    """
    Adam の 1 ステップ（params をその場で更新）

    重み減衰は勾配に加える L2 として扱う。grads[i] が None のパラメータは更新しない。
    frozen_rows[i] > 0 のとき先頭の行は更新しない。
    """
    beta1, beta2 = betas
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        g = grad + weight_decay * param if weight_decay else grad
        state.m[i] *= beta1
        state.m[i] += (1.0 - beta1) * g
        state.v[i] *= beta2
        state.v[i] += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * state.m[i] / (np.sqrt(state.v[i] / bc2) + eps)
        rows = frozen_rows[i] if frozen_rows is not None else 0
        if rows:
            update[:rows] = 0
        param -= update.astype(param.dtype)
    return state


class Adam:
    """Tensor パラメータ用の Adam"""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = EngineConstants.ADAM_BETAS,
                 eps: float = EngineConstants.ADAM_EPS, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like([p.data for p in self.params])
        self._frozen_rows: Dict[int, int] = {}

    def freeze_rows(self, tensor: Tensor, rows: int) -> None:
        self._frozen_rows[id(tensor)] = rows

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps, self.weight_decay,
                  [self._frozen_rows.get(id(p), 0) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ----------------------------------------------------------------------
# 評価
# ----------------------------------------------------------------------
@dataclass
class EvalResult:
    """累積テスト集合での評価結果"""
    task_accuracies: List[float]
    overall: float
    old_accuracy: Optional[float]
    new_accuracy: float
    per_class: Dict[int, Tuple[int, int]]
    predictions: np.ndarray


def evaluate(model, test_sets: Sequence[Tuple[np.ndarray, np.ndarray]], workers: int = 1,
             batch_size: int = EngineConstants.EVAL_BATCH_SIZE) -> EvalResult:
    """
    タスク 1..n のテスト集合に対する top-1 精度

    workers > 1 のときはテスト集合を分割して並列に推論する（モデルは読み取りのみ）。
    """
    if not test_sets:
        raise DataError("評価用のテスト集合がありません")
    for j, (images, _) in enumerate(test_sets, start=1):
        if len(images) == 0:
            raise DataError(f"タスク {j} のテスト集合が空です")
    images = np.concatenate([images for images, _ in test_sets])
    labels = np.concatenate([labels for _, labels in test_sets])
    task_of = np.concatenate([np.full(len(l), j) for j, (_, l) in enumerate(test_sets)])

    with no_grad():
        if workers > 1 and len(images) > batch_size:
            shards = np.array_split(np.arange(len(images)), workers)
            with ThreadPoolExecutor(max_workers=workers) as executor:
                parts = list(executor.map(lambda idx: model.predict(images[idx], batch_size), shards))
            predictions = np.concatenate(parts)
        else:
            predictions = model.predict(images, batch_size)

    correct = predictions == labels
    task_accuracies = [float(correct[task_of == j].mean()) for j in range(len(test_sets))]
    n = len(test_sets)
    old = float(correct[task_of < n - 1].mean()) if n > 1 else None
    per_class = {int(c): (int(correct[labels == c].sum()), int((labels == c).sum())) for c in np.unique(labels)}
    return EvalResult(task_accuracies, float(correct.mean()), old, task_accuracies[-1], per_class, predictions)


# ----------------------------------------------------------------------
# フェーズ状態
# ----------------------------------------------------------------------
@dataclass
class PhaseState:
    """フェーズ間で引き継ぐ状態"""
    phase: int
    model: IncrementalModel
    split: IncrementalSplit
    prototypes: PrototypeStore
    log: MetricsLog
    old_backbone: Optional[Backbone] = None
    optimizer: Optional[Adam] = None
    fingerprints: List[List[Tuple[str, Tuple[int, ...]]]] = field(default_factory=list)
    param_counts: List[int] = field(default_factory=list)
    touched: Dict[int, Set[int]] = field(default_factory=dict)
    allowed: Dict[int, Set[int]] = field(default_factory=dict)
    per_class: Dict[int, Dict[int, Tuple[int, int]]] = field(default_factory=dict)
    batch_audit: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def seen_classes(self) -> Tuple[int, ...]:
        return self.split.seen_classes(self.phase)


def _rng(seed: int, phase: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, stream])


def extract_features(backbone: Backbone, images: np.ndarray,
                     batch_size: int = EngineConstants.EVAL_BATCH_SIZE) -> np.ndarray:
    """評価モードの特徴 [M, D]"""
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(backbone.features(Tensor(images[start:start + batch_size]), training=False).data)
    if not chunks:
        return np.zeros((0, backbone.feature_dim))
    return np.concatenate(chunks)


def _finish_phase(state: PhaseState, loader: PhaseLoader, test_dataset: ImageDataset,
                  config: TrainConfig, extras: Dict[str, Any], progress: ProgressManager,
                  stage: int, total: int) -> EvalResult:
    """プロトタイプ登録・累積評価・構造指紋の記録（進捗は stage, stage+1）"""
    n = state.phase
    progress.set_status(stage, "プロトタイプを計算中...", total=total)
    _, images, labels = loader.full()
    features = extract_features(state.model.backbone, images)
    compute_prototypes(features, labels, state.split.classes_for(n), state.prototypes, phase=n)

    progress.set_status(stage + 1, "累積テスト集合で評価中...", total=total)
    result = evaluate(state.model, build_test_sets(test_dataset, state.split, n), config.eval_workers)
    state.log.record(result.task_accuracies, result.overall, result.old_accuracy, result.new_accuracy, **extras)
    state.per_class[n] = result.per_class
    state.fingerprints.append(state.model.fingerprint())
    state.param_counts.append(state.model.backbone.param_count())
    state.touched[n] = set(loader.touched_ids)
    if not state.touched[n] <= state.allowed[n]:
        raise ExemplarAccessError(f"フェーズ {n} でフェーズ外のサンプルに触れました")
    return result


# ----------------------------------------------------------------------
# 第 1 フェーズ
# ----------------------------------------------------------------------
def train_phase1(config: TrainConfig, backbone_config: BackboneConfig, split: IncrementalSplit,
                 train_dataset: ImageDataset, test_dataset: ImageDataset,
                 progress: Optional[ProgressManager] = None,
                 checkpoint_dir: Optional[str] = None) -> PhaseState:
    """全教師ありの CE 学習（蒸留・プロトタイプ損失なし）"""
    progress = progress or ProgressManager(enabled=False)
    classes = split.classes_for(1)
    progress.phase_banner(1, split.num_phases, classes)
    loader = PhaseLoader(train_dataset, classes, phase=1)

    model = IncrementalModel.create(backbone_config, len(classes), _rng(config.seed, 0, 0))
    model.phase = 1
    optimizer = Adam(model.trainable_parameters(), config.lr, config.betas, config.adam_eps, config.weight_decay)
    batch_rng = _rng(config.seed, 1, 1)

    progress.set_status(1, "CE で全体を学習中...", total=3)
    epoch_losses = []
    for epoch in progress.bar(range(config.epochs), total=config.epochs, desc="phase 1"):
        losses = []
        for _, images, labels in loader.iter_batches(config.batch_size, batch_rng):
            _, logits = model.forward(Tensor(images), training=True)
            loss = masked_ce(logits, labels, np.ones(len(labels), dtype=bool))
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.debug("phase 1 epoch %d: loss=%.6f", epoch + 1, epoch_losses[-1])

    state = PhaseState(phase=1, model=model, split=split, prototypes=PrototypeStore(), log=MetricsLog(),
                       optimizer=optimizer)
    state.allowed[1] = {int(i) for i in loader.sample_ids}
    _finish_phase(state, loader, test_dataset, config,
                  {"epoch_losses": epoch_losses, "final_loss": epoch_losses[-1]}, progress, 2, 3)
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, "phase1.npz"), model, state.prototypes, 1)
    return state


# ----------------------------------------------------------------------
# 増分フェーズ
# ----------------------------------------------------------------------
def _epoch_scores(model: IncrementalModel, loader: PhaseLoader, store: PrototypeStore) -> Dict[int, float]:
    ids, images, _ = loader.full()
    scores = cosine_scores(extract_features(model.backbone, images), store)
    return {int(i): float(s) for i, s in zip(ids, scores)}


def _adapter_state(backbone: Backbone) -> List[Tuple[str, np.ndarray]]:
    return [(name, tensor.data.copy()) for name, tensor in backbone.parameters() if ".adapter." in name]


def _classifier_state(classifier: Classifier) -> List[Tuple[str, np.ndarray]]:
    return [(name, tensor.data.copy()) for name, tensor in classifier.parameters()]


def _audit_step(before: List[Tuple[str, np.ndarray]], after: List[Tuple[str, np.ndarray]], masks) -> None:
    for (name, old), (_, new) in zip(before, after):
        if not np.array_equal(old, new):
            raise StateError(f"凍結された主枝 {name} が学習ステップで変化しました")
    if not masks.is_partition:
        raise StateError("CE / KD マスクが排他的な分割になっていません")
    if masks.scores.size and (masks.scores.min() < -1.0 or masks.scores.max() > 1.0):
        raise StateError("類似度スコアが [-1, 1] の範囲外です")


def _audit_updated(before: List[Tuple[str, np.ndarray]], after: List[Tuple[str, np.ndarray]], what: str) -> None:
    """学習対象が 1 ステップで少なくとも 1 要素は更新されたこと"""
    if before and all(np.array_equal(old, new) for (_, old), (_, new) in zip(before, after)):
        raise StateError(f"{what} が学習ステップで更新されませんでした")


def train_incremental_phase(state: PhaseState, config: TrainConfig, train_dataset: ImageDataset,
                            test_dataset: ImageDataset, progress: Optional[ProgressManager] = None,
                            checkpoint_dir: Optional[str] = None) -> PhaseState:
    """
    増分フェーズ n の学習

    (1) 前フェーズの融合済みバックボーンを教師として複製
    (2) 全ブロックをアダプタで拡張し主枝と BN 統計を凍結
    (3) 分類器を新クラス分だけ拡張
    (4) マスク付き CE + λ·KD + γ·プロトタイプ損失で学習
    (5) アダプタを主枝へ融合
    (6) 新クラスのプロトタイプを計算
    (7) 累積テスト集合で評価
    """
    progress = progress or ProgressManager(enabled=False)
    method = config.method
    n = state.phase + 1
    classes = state.split.classes_for(n)
    progress.phase_banner(n, state.split.num_phases, classes)
    loader = PhaseLoader(train_dataset, classes, phase=n)
    if loader.classes & set(state.split.seen_classes(n - 1)):
        raise ExemplarAccessError(f"フェーズ {n} のローダーに旧クラスが含まれています")
    allowed = {int(i) for i in loader.sample_ids}

    progress.set_status(1, "教師ネットワークを複製中...", total=INCREMENTAL_STAGES)
    old_backbone = state.model.backbone.copy()
    old_backbone.freeze()

    progress.set_status(2, "ブロックを拡張中...", total=INCREMENTAL_STAGES)
    if method.dsr:
        backbone = state.model.backbone.expand_all(AdapterKind.parse(config.adapter_kind), config.adapter_bias,
                                                   config.train_adapter_bn_stats)
    else:
        backbone = state.model.backbone.copy()
        backbone.set_trainable(True)

    progress.set_status(3, "分類器を拡張中...", total=INCREMENTAL_STAGES)
    classifier = extend_classifier(state.model.classifier, len(classes), _rng(config.seed, n, 3))
    model = IncrementalModel(backbone, classifier, phase=n)
    optimizer = Adam(model.trainable_parameters(), config.lr, config.betas, config.adam_eps, config.weight_decay)
    if config.freeze_old_rows:
        optimizer.freeze_rows(classifier.weight, classifier.frozen_rows)
        optimizer.freeze_rows(classifier.bias, classifier.frozen_rows)

    store = state.prototypes
    weights = config.loss_weights
    batch_rng = _rng(config.seed, n, 1)
    proto_rng = _rng(config.seed, n, 2)

    _, all_images, all_labels = loader.full()
    start_scores = cosine_scores(extract_features(model.backbone, all_images), store)
    similarity = {str(c): s for c, s in similarity_stats(start_scores, all_labels).items()}

    progress.set_status(4, "マスク付き同時学習中...", total=INCREMENTAL_STAGES)
    epoch_losses: List[float] = []
    counts = {"ce": 0, "kd": 0}
    first_step: Dict[str, float] = {}
    for epoch in progress.bar(range(config.epochs), total=config.epochs, desc=f"phase {n}"):
        epoch_scores = _epoch_scores(model, loader, store) if method.psm and config.score_schedule == "epoch" else None
        losses = []
        for ids, images, labels in loader.iter_batches(config.batch_size, batch_rng):
            x = Tensor(images)
            r_new, logits = model.forward(x, training=True)
            if method.mbd:
                with no_grad():
                    r_old = old_backbone.features(x, training=False)

            if method.psm:
                scores = (np.array([epoch_scores[int(i)] for i in ids]) if epoch_scores is not None
                          else cosine_scores(r_new, store))
                masks = partition(scores, config.sigma)
                ce_mask, kd_mask = masks.ce_mask, masks.kd_mask
            else:
                masks = None
                ce_mask = np.ones(len(labels), dtype=bool)
                kd_mask = np.full(len(labels), method.mbd)

            ce = masked_ce(logits, labels, ce_mask)
            kd = kd_loss(r_new, r_old, kd_mask, config.kd_squared) if method.mbd else zero_scalar()
            if method.proto and len(store):
                p_batch, y_batch = oversample(store, config.batch_size, proto_rng)
                proto = proto_loss(classifier, p_batch, y_batch)
            else:
                proto = zero_scalar()
            loss = total_loss(ce, kd, proto, weights)

            if not first_step:
                first_step = {
                    "kd_loss": kd.item(),
                    "feature_gap": float(np.max(np.abs(r_new.data - r_old.data))) if method.mbd else 0.0,
                }
            before = [(k, v.copy()) for k, v in backbone.main_state()] if config.audit_invariants and method.dsr else []
            expect_adapter = config.audit_invariants and method.dsr and bool(ce_mask.any())
            expect_classifier = config.audit_invariants and (bool(ce_mask.any()) or (proto.requires_grad and weights.gamma_proto > 0))
            adapters_before = _adapter_state(backbone) if expect_adapter else []
            classifier_before = _classifier_state(classifier) if expect_classifier else []

            if loss.requires_grad:
                loss.backward()
            optimizer.step()
            optimizer.zero_grad()

            if config.audit_invariants:
                if masks is not None:
                    _audit_step(before, backbone.main_state() if before else [], masks)
                    state.batch_audit.append({
                        "phase": n, "size": int(len(labels)), "ce": int(ce_mask.sum()), "kd": int(kd_mask.sum()),
                        "score_min": float(masks.scores.min()), "score_max": float(masks.scores.max()),
                    })
                elif before:
                    for (name, old), (_, new) in zip(before, backbone.main_state()):
                        if not np.array_equal(old, new):
                            raise StateError(f"凍結された主枝 {name} が学習ステップで変化しました")
                _audit_updated(adapters_before, _adapter_state(backbone), "アダプタ")
                _audit_updated(classifier_before, _classifier_state(classifier), "分類器")
            counts["ce"] += int(ce_mask.sum())
            counts["kd"] += int(kd_mask.sum())
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.debug("phase %d epoch %d: loss=%.6f", n, epoch + 1, epoch_losses[-1])

    extras: Dict[str, Any] = {
        "epoch_losses": epoch_losses,
        "final_loss": epoch_losses[-1],
        "first_step": first_step,
        "mask_counts": counts,
        "similarity": similarity,
    }

    progress.set_status(5, "アダプタを主枝へ融合中...", total=INCREMENTAL_STAGES)
    test_sets = build_test_sets(test_dataset, state.split, n)
    if method.dsr:
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, f"phase{n}_expanded.npz"), model, store, n)
        expanded_result = evaluate(model, test_sets, config.eval_workers)
        fused = IncrementalModel(model.backbone.fuse_all(), classifier, phase=n)
        test_images = np.concatenate([images for images, _ in test_sets])
        deviation = float(np.max(np.abs(extract_features(model.backbone, test_images)
                                        - extract_features(fused.backbone, test_images))))
        fused_result = evaluate(fused, test_sets, config.eval_workers)
        extras["fusion"] = {
            "expanded_accuracy": expanded_result.overall,
            "fused_accuracy": fused_result.overall,
            "prediction_agreement": float(np.mean(expanded_result.predictions == fused_result.predictions)),
            "max_feature_deviation": deviation,
        }
        logger.info("融合: 拡張 %.4f / 融合 %.4f, 最大特徴偏差 %.3e",
                    expanded_result.overall, fused_result.overall, deviation)
        model = fused

    state.phase = n
    state.model = model
    state.old_backbone = old_backbone
    state.optimizer = optimizer
    state.allowed[n] = allowed
    _finish_phase(state, loader, test_dataset, config, extras, progress, 6, INCREMENTAL_STAGES)
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, f"phase{n}.npz"), model, store, n)
    return state


# ----------------------------------------------------------------------
# プロトコル全体
# ----------------------------------------------------------------------
def run_protocol(config: TrainConfig, data_config: DataConfig, backbone_config: BackboneConfig,
                 progress: Optional[ProgressManager] = None, memory: Optional[MemoryManager] = None,
                 checkpoint_dir: Optional[str] = None) -> PhaseState:
    """データ準備から全フェーズの学習・評価まで"""
    progress = progress or ProgressManager(enabled=False)
    with precision(config.precision):
        train_raw, test_raw = load_datasets(data_config, config.seed)
        split = build_split(train_raw, data_config.base, data_config.phases, config.seed)
        train_dataset, test_dataset = split.remap(train_raw), split.remap(test_raw)
        if tuple(train_dataset.image_shape) != tuple(backbone_config.input_shape):
            raise ConfigurationError(
                f"画像形状 {train_dataset.image_shape} とモデル入力 {backbone_config.input_shape} が一致しません")

        state = train_phase1(config, backbone_config, split, train_dataset, test_dataset, progress, checkpoint_dir)
        if memory is not None:
            memory.snapshot("phase1", phase=1, seed=config.seed)
        for n in range(2, split.num_phases + 1):
            state = train_incremental_phase(state, config, train_dataset, test_dataset, progress, checkpoint_dir)
            if memory is not None:
                memory.collect()
                memory.snapshot(f"phase{n}", phase=n, seed=config.seed)
    return state
