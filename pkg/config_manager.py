"""
設定管理モジュール
実行設定（JSON）の読み込み・プリセット適用・上書き・検証を担当する
"""

import json
import logging
import os
from copy import deepcopy
from typing import Any, Dict, List, Optional, Sequence

from backbone import BackboneConfig
from data_io import DataConfig
from error_handler import ConfigurationError, EngineError
from trainer import MethodToggles, TrainConfig

logger = logging.getLogger(__name__)


# スケール区分の定義
SCALE_META = {
    "desk": {
        "label": "デスク規模",
        "description": "合成データ・小型 CNN による検証用",
    },
    "full": {
        "label": "フル規模",
        "description": "CIFAR-100・100 エポックの完全設定",
    },
}

# 各スケールのプリセット
SCALE_PRESETS = {
    "desk": {
        "data": {"source": "synthetic", "classes": 10, "per_class": 200, "test_per_class": 50,
                 "image_shape": [3, 16, 16], "base": 4, "phases": 3},
        "train": {"epochs": 20, "batch_size": 32},
    },
    "full": {
        "data": {"source": "cifar100", "classes": 100, "image_shape": [3, 32, 32], "base": 50, "phases": 5},
        "train": {"epochs": 100, "batch_size": 128},
    },
}


class ConfigManager:
    """設定管理クラス"""

    CONFIG_ECHO_FILE = "config.json"

    DEFAULT_CONFIG = {
        "scale": "desk",
        "seed": 0,
        "repeats": 1,
        "precision": "float32",
        "output_dir": "runs/default",
        "data": {
            "source": "synthetic",
            "root": "",
            "classes": 10,
            "per_class": 200,
            "test_per_class": 50,
            "image_shape": [3, 16, 16],
            "noise": 0.15,
            "base": 4,
            "phases": 3,
        },
        "model": {
            "channels": [16, 32, 64],
            "strides": [1, 2, 2],
            "use_bn": True,
            "bn_eps": 1e-5,
            "bn_momentum": 0.1,
        },
        "train": {
            "epochs": 20,
            "batch_size": 32,
            "lr": 0.001,
            "weight_decay": 0.0005,
            "betas": [0.9, 0.999],
            "adam_eps": 1e-8,
            "lambda_kd": 10.0,
            "gamma_proto": 10.0,
            "sigma": 0.8,
            "adapter_kind": "conv1x1",
            "adapter_bias": True,
            "train_adapter_bn_stats": True,
            "kd_squared": True,
            "freeze_old_rows": False,
            "score_schedule": "step",
        },
        "method": {
            "dsr": True,
            "mbd": True,
            "psm": True,
            "proto": True,
        },
        "runtime": {
            "progress": True,
            "audit_invariants": False,
            "eval_workers": 1,
            "save_checkpoints": True,
            "plots": True,
        },
    }

    def __init__(self, config_path: Optional[str] = None, overrides: Sequence[str] = ()):
        self.config_path = config_path
        self.config = self._load_config(config_path, overrides)
        self.validate()

    # ------------------------------------------------------------------
    # 設定ファイルの読み書き
    # ------------------------------------------------------------------
    def _load_config(self, config_path: Optional[str], overrides: Sequence[str]) -> Dict[str, Any]:
        """既定値 → スケールプリセット → 設定ファイル → --set の順に適用"""
        loaded: Dict[str, Any] = {}
        if config_path is not None:
            if not os.path.isfile(config_path):
                raise FileNotFoundError(f"設定ファイルが存在しません: {config_path}")
            try:
                with open(config_path, "r", encoding="utf-8") as handle:
                    loaded = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"設定ファイルの JSON が不正です: {config_path} ({exc})") from exc
            if not isinstance(loaded, dict):
                raise ConfigurationError("設定ファイルの最上位は JSON オブジェクトである必要があります")

        parsed = [self.parse_override(item) for item in overrides]
        scale = loaded.get("scale", self.DEFAULT_CONFIG["scale"])
        for key, value in parsed:
            if key == "scale":
                scale = value
        if scale not in SCALE_PRESETS:
            raise ConfigurationError(f"未知のスケールです: {scale} (選択肢: {', '.join(SCALE_PRESETS)})")

        merged = deepcopy(self.DEFAULT_CONFIG)
        self._merge(merged, SCALE_PRESETS[scale], "")
        self._merge(merged, loaded, "")
        merged["scale"] = scale
        for key, value in parsed:
            self._set_dotted(merged, key, value)
        return merged

    def _merge(self, base: Dict[str, Any], incoming: Dict[str, Any], path: str) -> None:
        """未知のキーを拒否しながら再帰的に上書き"""
        for key, value in incoming.items():
            dotted = f"{path}{key}"
            if key not in base:
                raise ConfigurationError(f"未知の設定キーです: {dotted}")
            if isinstance(base[key], dict):
                if not isinstance(value, dict):
                    raise ConfigurationError(f"設定キー {dotted} はオブジェクトである必要があります")
                self._merge(base[key], value, f"{dotted}.")
            else:
                base[key] = deepcopy(value)

    def _set_dotted(self, config: Dict[str, Any], dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        node = config
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigurationError(f"未知の設定キーです: {dotted}")
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigurationError(f"未知の設定キーです: {dotted}")
        node[parts[-1]] = value

    @staticmethod
    def parse_override(item: str):
        """train.sigma=0.5 → ("train.sigma", 0.5)（JSON として解釈できなければ文字列）"""
        if "=" not in item:
            raise ConfigurationError(f"--set は key=value 形式で指定してください: {item}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"--set のキーが空です: {item}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        return key, value

    def save_config(self, directory: str) -> str:
        """実行ディレクトリへ設定をエコー"""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, self.CONFIG_ECHO_FILE)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.config, handle, ensure_ascii=False, indent=2, sort_keys=True)
        return path

    # ------------------------------------------------------------------
    # 一般設定値の取得・設定
    # ------------------------------------------------------------------
    def get(self, dotted: str, default=None):
        """設定値の取得（"train.sigma" 形式）"""
        node: Any = self.config
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def as_dict(self) -> Dict[str, Any]:
        return deepcopy(self.config)

    def get_scale_label(self, scale: Optional[str] = None) -> str:
        return SCALE_META[scale or self.config["scale"]]["label"]

    # ------------------------------------------------------------------
    # 型付き設定への変換
    # ------------------------------------------------------------------
    def to_data_config(self) -> DataConfig:
        data = self.config["data"]
        return DataConfig(
            source=data["source"],
            root=data["root"],
            classes=int(data["classes"]),
            per_class=int(data["per_class"]),
            test_per_class=int(data["test_per_class"]),
            image_shape=tuple(int(v) for v in data["image_shape"]),
            noise=float(data["noise"]),
            base=int(data["base"]),
            phases=int(data["phases"]),
        )

    def to_backbone_config(self) -> BackboneConfig:
        model = self.config["model"]
        return BackboneConfig(
            input_shape=tuple(int(v) for v in self.config["data"]["image_shape"]),
            channels=tuple(int(v) for v in model["channels"]),
            strides=tuple(int(v) for v in model["strides"]),
            use_bn=bool(model["use_bn"]),
            bn_eps=float(model["bn_eps"]),
            bn_momentum=float(model["bn_momentum"]),
        )

    def to_train_config(self, seed: Optional[int] = None) -> TrainConfig:
        train = self.config["train"]
        method = self.config["method"]
        runtime = self.config["runtime"]
        return TrainConfig(
            epochs=int(train["epochs"]),
            batch_size=int(train["batch_size"]),
            lr=float(train["lr"]),
            weight_decay=float(train["weight_decay"]),
            betas=tuple(float(b) for b in train["betas"]),
            adam_eps=float(train["adam_eps"]),
            lambda_kd=float(train["lambda_kd"]),
            gamma_proto=float(train["gamma_proto"]),
            sigma=float(train["sigma"]),
            adapter_kind=str(train["adapter_kind"]),
            adapter_bias=bool(train["adapter_bias"]),
            train_adapter_bn_stats=bool(train["train_adapter_bn_stats"]),
            kd_squared=bool(train["kd_squared"]),
            freeze_old_rows=bool(train["freeze_old_rows"]),
            score_schedule=str(train["score_schedule"]),
            method=MethodToggles(**{k: bool(v) for k, v in method.items()}),
            seed=int(self.config["seed"] if seed is None else seed),
            precision=str(self.config["precision"]),
            audit_invariants=bool(runtime["audit_invariants"]),
            eval_workers=int(runtime["eval_workers"]),
        )

    def seeds(self) -> List[int]:
        """反復実行のシード列 seed, seed+1, ..."""
        return [int(self.config["seed"]) + k for k in range(int(self.config["repeats"]))]

    def validate(self) -> None:
        """型付き設定を一度構築して値の整合性を検査"""
        if int(self.config["repeats"]) < 1:
            raise ConfigurationError(f"repeats は 1 以上です: {self.config['repeats']}")
        try:
            self.to_data_config()
            self.to_backbone_config()
            self.to_train_config()
        except EngineError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"設定値の型が不正です: {exc}") from exc
