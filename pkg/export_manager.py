"""
エクスポート管理モジュール
実行結果（metrics.json / metrics.csv / クラス別精度 / σ 掃引 / アブレーション / リソース）の書き出し
"""

import csv
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

from constants import ABLATION_CSV, METRICS_CSV, METRICS_JSON, RESOURCES_JSON, SWEEP_CSV
from metrics import MetricsLog, csv_header, csv_rows, summary

logger = logging.getLogger(__name__)


class ExportManager:
    """エクスポート管理クラス"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        os.makedirs(output_dir, exist_ok=True)

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _write_json(self, name: str, payload: Dict[str, Any]) -> str:
        path = self._path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(payload, handle, ensure_ascii=False, indent=2, sort_keys=True)
            handle.write("\n")
        return path

    def _write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        path = self._path(name)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        return path

    # ------------------------------------------------------------------
    def export_metrics(self, state, config_echo: Dict[str, Any], method_label: str) -> Dict[str, str]:
        """
        metrics.json と metrics.csv の書き出し

        時刻やメモリ量は含めないため、同一設定・同一精度の再実行で
        metrics.json はバイト単位で一致する。
        """
        log: MetricsLog = state.log
        payload = summary(log)
        payload.update({
            "method": method_label,
            "seed": config_echo.get("seed"),
            "config": config_echo,
            "class_order": list(state.split.class_order),
            "phase_classes": [list(c) for c in state.split.phase_classes],
            "param_counts": state.param_counts,
            "structure_constant": all(fp == state.fingerprints[0] for fp in state.fingerprints),
            "exemplar_free": all(state.touched[n] <= state.allowed[n] for n in state.touched),
        })
        paths = {
            "json": self._write_json(METRICS_JSON, payload),
            "csv": self._write_csv(METRICS_CSV, csv_header(len(log)), csv_rows(log)),
        }
        for phase, per_class in sorted(state.per_class.items()):
            paths[f"per_class_{phase}"] = self.export_per_class(phase, per_class, state.split.class_order)
        logger.info("指標を書き出しました: %s", self.output_dir)
        return paths

    def export_per_class(self, phase: int, per_class: Dict[int, Any], class_order: Sequence[int]) -> str:
        """クラス別の正解数・件数・精度（混同分析用）"""
        rows = []
        for class_id, (correct, total) in sorted(per_class.items()):
            rows.append([class_id, class_order[class_id], correct, total, correct / total if total else ""])
        return self._write_csv(f"per_class_phase{phase}.csv",
                               ["class_id", "dataset_label", "correct", "total", "accuracy"], rows)

    def export_sweep(self, rows: List[Dict[str, Any]]) -> str:
        """σ 掃引の結果（指定順）"""
        return self._write_csv(SWEEP_CSV, ["sigma", "avg_inc_acc", "avg_forgetting", "repeats"],
                               [[r["sigma"], r["avg_inc_acc"], r["avg_forgetting"], r["repeats"]] for r in rows])

    def export_ablation(self, rows: List[Dict[str, Any]]) -> str:
        """アブレーション各行の要約"""
        header = ["row", "dsr", "mbd", "psm", "proto", "avg_inc_acc", "avg_forgetting", "repeats"]
        return self._write_csv(ABLATION_CSV, header, [[r[k] for k in header] for r in rows])

    def export_resources(self, snapshots: List[Dict[str, Any]], extra: Optional[Dict[str, Any]] = None) -> str:
        """メモリ・経過時間の記録（再現性の対象外）"""
        return self._write_json(RESOURCES_JSON, {"snapshots": snapshots, **(extra or {})})
