"""
Expand-Fuse Incremental - メインコントローラー
拡張・融合による非エグザンプラ型クラス増分学習の実験ハーネス
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from checkpoint_manager import load_checkpoint
from config_manager import ConfigManager
from constants import RUN_LOG, EngineConstants
from curve_plot_manager import CurvePlotManager
from error_handler import ConfigurationError, StateError, error_handler
from export_manager import ExportManager
from memory_manager import MemoryManager
from metrics import avg_forgetting, avg_incremental_accuracy
from progress_manager import ProgressManager
from tensor_core import Tensor, no_grad, precision
from trainer import run_protocol

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# アブレーションの行（プロトタイプ損失は常に有効）
ABLATION_ROWS = [
    ("none", {"dsr": False, "mbd": False, "psm": False, "proto": True}),
    ("dsr", {"dsr": True, "mbd": False, "psm": False, "proto": True}),
    ("mbd", {"dsr": False, "mbd": True, "psm": False, "proto": True}),
    ("dsr+mbd", {"dsr": True, "mbd": True, "psm": False, "proto": True}),
    ("dsr+mbd+psm", {"dsr": True, "mbd": True, "psm": True, "proto": True}),
]


class MainController:
    """メインアプリケーションコントローラー"""

    def __init__(self, log_level: str = "INFO"):
        self.log_level = log_level
        self.memory_manager = MemoryManager()
        self.plot_manager = CurvePlotManager()
        self._file_handler: Optional[logging.Handler] = None

    # ------------------------------------------------------------------
    # ログ
    # ------------------------------------------------------------------
    def _attach_run_log(self, directory: str) -> None:
        """実行ディレクトリに run.log を追加"""
        self._detach_run_log()
        os.makedirs(directory, exist_ok=True)
        handler = logging.FileHandler(os.path.join(directory, RUN_LOG), encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler.setLevel(self.log_level)
        logging.getLogger().addHandler(handler)
        self._file_handler = handler

    def _detach_run_log(self) -> None:
        if self._file_handler is not None:
            logging.getLogger().removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None

    # ------------------------------------------------------------------
    # 実行本体
    # ------------------------------------------------------------------
    def _run_repeats(self, config_manager: ConfigManager, output_dir: str) -> Dict[str, float]:
        """設定を seed, seed+1, ... で実行し、各実行の指標を書き出して平均を返す"""
        seeds = config_manager.seeds()
        runtime = config_manager.get("runtime")
        data_config = config_manager.to_data_config()
        backbone_config = config_manager.to_backbone_config()
        progress = ProgressManager(enabled=bool(runtime["progress"]))
        accuracies, forgettings = [], []
        for seed in seeds:
            run_dir = output_dir if len(seeds) == 1 else os.path.join(output_dir, f"seed{seed}")
            train_config = config_manager.to_train_config(seed)
            checkpoint_dir = os.path.join(run_dir, "checkpoints") if runtime["save_checkpoints"] else None
            logger.info("実行開始: %s 手法=%s seed=%d 出力=%s", config_manager.get_scale_label(),
                        train_config.method.label, seed, run_dir)
            state = run_protocol(train_config, data_config, backbone_config, progress,
                                 self.memory_manager, checkpoint_dir)
            echo = config_manager.as_dict()
            echo["seed"] = seed
            echo["repeats"] = 1
            ExportManager(run_dir).export_metrics(state, echo, train_config.method.label)
            if runtime["plots"]:
                self.plot_manager.draw_accuracy_curve(state.log, os.path.join(run_dir, "accuracy_curve.png"),
                                                      title=f"{train_config.method.label} (seed={seed})")
            accuracies.append(avg_incremental_accuracy(state.log))
            forgettings.append(avg_forgetting(state.log) if len(state.log) >= 2 else float("nan"))
        return {
            "avg_inc_acc": float(np.mean(accuracies)),
            "avg_forgetting": float(np.mean(forgettings)),
            "repeats": len(seeds),
        }

    def _finish(self, output_dir: str) -> None:
        ExportManager(output_dir).export_resources(self.memory_manager.get_memory_stats())

    def cmd_train(self, config_path: str, overrides: Sequence[str] = ()) -> int:
        """全フェーズの学習を実行し、指標とチェックポイントを書き出す"""
        try:
            config_manager = ConfigManager(config_path, overrides)
            output_dir = config_manager.get("output_dir")
            self._attach_run_log(output_dir)
            config_manager.save_config(output_dir)
            result = self._run_repeats(config_manager, output_dir)
            self._finish(output_dir)
            print(f"平均増分精度: {result['avg_inc_acc']:.4f}  平均忘却率: {result['avg_forgetting']:.4f}")
            return 0
        except Exception as e:
            return error_handler.handle_exception(e, {"command": "train", "config": config_path})
        finally:
            self._detach_run_log()

    def cmd_fusecheck(self, checkpoint_path: str, trials: int, tol: Optional[float] = None) -> int:
        """拡張済みチェックポイントを融合し、ランダム入力で特徴の最大偏差を報告"""
        try:
            if trials < 1:
                raise ConfigurationError(f"trials は 1 以上です: {trials}")
            record = load_checkpoint(checkpoint_path)
            model = record.model
            if not model.backbone.is_expanded:
                raise StateError("fuse-check には拡張済み（アダプタ付き）のチェックポイントが必要です")
            dtype_name = str(record.meta.get("dtype", EngineConstants.DEFAULT_PRECISION))
            if dtype_name not in EngineConstants.PRECISIONS:
                raise ConfigurationError(f"チェックポイントの精度が不明です: {dtype_name}")
            tol = EngineConstants.FUSION_TOLERANCE[dtype_name] if tol is None else tol

            with precision(dtype_name), no_grad():
                fused = model.backbone.fuse_all()
                rng = np.random.default_rng(0)
                deviation = 0.0
                for _ in range(trials):
                    x = Tensor(rng.uniform(0.0, 1.0, size=(4,) + tuple(model.backbone.config.input_shape)))
                    expanded_out = model.backbone.features(x, training=False).data
                    fused_out = fused.features(x, training=False).data
                    deviation = max(deviation, float(np.max(np.abs(expanded_out - fused_out))))

            status = "OK" if deviation <= tol else "NG"
            print(f"fuse-check: trials={trials} precision={dtype_name} max_abs_deviation={deviation:.3e} "
                  f"tol={tol:.1e} {status}")
            logger.info("fuse-check %s: 最大偏差 %.3e (許容 %.1e)", checkpoint_path, deviation, tol)
            return 0 if deviation <= tol else 1
        except Exception as e:
            return error_handler.handle_exception(e, {"command": "fuse-check", "checkpoint": checkpoint_path})

    def cmd_sweep_sigma(self, config_path: str, values: Sequence[float], overrides: Sequence[str] = ()) -> int:
        """σ ごとにプロトコルを実行し (σ, 平均増分精度) を書き出す"""
        try:
            base = ConfigManager(config_path, overrides)
            output_dir = base.get("output_dir")
            self._attach_run_log(output_dir)
            rows = []
            for sigma in values:
                config_manager = ConfigManager(config_path, list(overrides) + [f"train.sigma={sigma}"])
                result = self._run_repeats(config_manager, os.path.join(output_dir, f"sigma_{sigma}"))
                rows.append({"sigma": float(sigma), **result})
                logger.info("σ=%.3f: 平均増分精度 %.4f", sigma, result["avg_inc_acc"])
            exporter = ExportManager(output_dir)
            path = exporter.export_sweep(rows)
            if base.get("runtime.plots"):
                self.plot_manager.draw_sigma_sweep(rows, os.path.join(output_dir, "sigma_sweep.png"))
            self._finish(output_dir)
            print(f"σ 掃引の結果: {path}")
            return 0
        except Exception as e:
            return error_handler.handle_exception(e, {"command": "sweep-sigma", "config": config_path})
        finally:
            self._detach_run_log()

    def cmd_ablate(self, config_path: str, overrides: Sequence[str] = ()) -> int:
        """手法スイッチの各組み合わせを実行し要約を書き出す"""
        try:
            base = ConfigManager(config_path, overrides)
            output_dir = base.get("output_dir")
            self._attach_run_log(output_dir)
            rows = []
            for name, toggles in ABLATION_ROWS:
                switches = [f"method.{k}={'true' if v else 'false'}" for k, v in toggles.items()]
                config_manager = ConfigManager(config_path, list(overrides) + switches)
                result = self._run_repeats(config_manager, os.path.join(output_dir, "ablation", name))
                rows.append({"row": name, **toggles, **result})
            path = ExportManager(output_dir).export_ablation(rows)
            self._finish(output_dir)
            print(f"アブレーションの結果: {path}")
            return 0
        except Exception as e:
            return error_handler.handle_exception(e, {"command": "ablate", "config": config_path})
        finally:
            self._detach_run_log()


def _parse_values(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"σ の一覧を解釈できません: {text}") from exc
    if not values:
        raise argparse.ArgumentTypeError("σ の一覧が空です")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expand-fuse", description="拡張・融合によるクラス増分学習ハーネス")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="全フェーズの学習と評価")
    train.add_argument("--config", required=True)
    train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    fuse_check = commands.add_parser("fuse-check", help="チェックポイントの融合偏差を検査")
    fuse_check.add_argument("--checkpoint", required=True)
    fuse_check.add_argument("--trials", type=int, default=100)
    fuse_check.add_argument("--tol", type=float, default=None)

    sweep = commands.add_parser("sweep-sigma", help="類似度しきい値 σ の掃引")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--values", required=True, type=_parse_values)
    sweep.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    ablate = commands.add_parser("ablate", help="手法スイッチのアブレーション")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)
    controller = MainController(args.log_level)
    if args.command == "train":
        return controller.cmd_train(args.config, args.overrides)
    if args.command == "fuse-check":
        return controller.cmd_fusecheck(args.checkpoint, args.trials, args.tol)
    if args.command == "sweep-sigma":
        return controller.cmd_sweep_sigma(args.config, args.values, args.overrides)
    return controller.cmd_ablate(args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
