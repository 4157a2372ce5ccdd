"""
チェックポイント管理モジュール
モデル・BN 統計・プロトタイプ・フェーズ番号を npz 形式で保存／復元
"""

import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from backbone import Backbone, BackboneConfig, Classifier, IncrementalModel
from constants import CHECKPOINT_FORMAT, CHECKPOINT_VERSION
from error_handler import CheckpointError
from protomem import PrototypeStore
from reparam import Adapter, AdapterKind, BatchNormParams, ConvBlock
from tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class CheckpointRecord:
    """読み込んだチェックポイント"""
    model: IncrementalModel
    prototypes: PrototypeStore
    phase: int
    meta: Dict[str, Any] = field(default_factory=dict)


# ----------------------------------------------------------------------
# 保存
# ----------------------------------------------------------------------
def _bn_layout(bn: Optional[BatchNormParams]) -> Optional[Dict[str, Any]]:
    if bn is None:
        return None
    return {"eps": bn.eps, "momentum": bn.momentum, "frozen_stats": bn.frozen_stats}


def _block_layout(block: ConvBlock) -> Dict[str, Any]:
    adapter = block.adapter
    return {
        "stride": block.stride,
        "padding": block.padding,
        "frozen_main": block.frozen_main,
        "main_bn": _bn_layout(block.main_bn),
        "adapter": None if adapter is None else {
            "kind": adapter.kind.value,
            "stride": adapter.stride,
            "padding": adapter.padding,
            "has_bias": adapter.bias is not None,
            "bn": _bn_layout(adapter.bn),
        },
    }


def save_checkpoint(path: str, model: IncrementalModel, prototypes: PrototypeStore,
                    phase: int, config: Optional[Dict[str, Any]] = None) -> str:
    """チェックポイントを保存して保存先パスを返す"""
    arrays: Dict[str, np.ndarray] = {}
    for name, tensor in model.backbone.parameters():
        arrays[f"backbone.{name}"] = tensor.data
    for name, array in model.backbone.buffers():
        arrays[f"backbone.{name}"] = array
    for name, tensor in model.classifier.parameters():
        arrays[f"classifier.{name}"] = tensor.data
    centroids, ids = prototypes.matrix()
    arrays["prototypes.ids"] = ids
    arrays["prototypes.centroids"] = centroids
    arrays["prototypes.phases"] = np.array([prototypes.get(c).phase for c in ids], dtype=np.int64)

    config_dict = asdict(model.backbone.config)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "phase": int(phase),
        "dtype": str(model.classifier.weight.dtype),
        "backbone": {k: list(v) if isinstance(v, tuple) else v for k, v in config_dict.items()},
        "blocks": [_block_layout(block) for block in model.backbone.blocks],
        "classifier_frozen_rows": model.classifier.frozen_rows,
        "config": config or {},
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True, ensure_ascii=False))

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    logger.info("チェックポイントを保存しました: %s (phase=%d)", path, phase)
    return path


# ----------------------------------------------------------------------
# 読み込み
# ----------------------------------------------------------------------
def _tensor(arrays, key: str, trainable: bool) -> Tensor:
    data = arrays[key]
    return Tensor(data, requires_grad=trainable, dtype=data.dtype)


def _restore_bn(arrays, prefix: str, layout: Optional[Dict[str, Any]], trainable: bool) -> Optional[BatchNormParams]:
    if layout is None:
        return None
    return BatchNormParams(
        gamma=_tensor(arrays, f"{prefix}.gamma", trainable),
        beta=_tensor(arrays, f"{prefix}.beta", trainable),
        running_mean=arrays[f"{prefix}.running_mean"].copy(),
        running_var=arrays[f"{prefix}.running_var"].copy(),
        eps=float(layout["eps"]),
        momentum=float(layout["momentum"]),
        frozen_stats=bool(layout["frozen_stats"]),
    )


def _restore_block(arrays, index: int, layout: Dict[str, Any]) -> ConvBlock:
    prefix = f"backbone.blocks.{index}"
    main_trainable = not layout["frozen_main"]
    block = ConvBlock(
        main_weight=_tensor(arrays, f"{prefix}.main_weight", main_trainable),
        main_bias=_tensor(arrays, f"{prefix}.main_bias", main_trainable),
        main_bn=_restore_bn(arrays, f"{prefix}.main_bn", layout["main_bn"], main_trainable),
        frozen_main=bool(layout["frozen_main"]),
        stride=int(layout["stride"]),
        padding=int(layout["padding"]),
    )
    adapter = layout["adapter"]
    if adapter is not None:
        block.adapter = Adapter(
            kind=AdapterKind.parse(adapter["kind"]),
            weight=_tensor(arrays, f"{prefix}.adapter.weight", True),
            bias=_tensor(arrays, f"{prefix}.adapter.bias", True) if adapter["has_bias"] else None,
            bn=_restore_bn(arrays, f"{prefix}.adapter.bn", adapter["bn"], True),
            stride=int(adapter["stride"]),
            padding=int(adapter["padding"]),
        )
    return block


def load_checkpoint(path: str) -> CheckpointRecord:
    """
    チェックポイントを読み込む

    Raises:
        FileNotFoundError: ファイルが存在しない
        CheckpointError: 形式・バージョン・内容の不整合
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"チェックポイントが存在しません: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
        meta = json.loads(str(arrays["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"チェックポイント形式が不正です: {meta.get('format')}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"未対応のチェックポイントバージョンです: {meta.get('version')}")
        backbone_meta = dict(meta["backbone"])
        for key in ("input_shape", "channels", "strides"):
            backbone_meta[key] = tuple(backbone_meta[key])
        blocks = [_restore_block(arrays, i, layout) for i, layout in enumerate(meta["blocks"])]
        classifier = Classifier(
            weight=_tensor(arrays, "classifier.weight", True),
            bias=_tensor(arrays, "classifier.bias", True),
            frozen_rows=int(meta["classifier_frozen_rows"]),
        )
        model = IncrementalModel(Backbone(BackboneConfig(**backbone_meta), blocks), classifier, int(meta["phase"]))
        store = PrototypeStore()
        for class_id, centroid, phase in zip(arrays["prototypes.ids"], arrays["prototypes.centroids"],
                                             arrays["prototypes.phases"]):
            store.add(int(class_id), centroid, int(phase))
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, OSError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"チェックポイントを解析できません: {path} ({exc})") from exc
    logger.info("チェックポイントを読み込みました: %s (phase=%d)", path, model.phase)
    return CheckpointRecord(model, store, int(meta["phase"]), meta)
