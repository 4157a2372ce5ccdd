"""
評価指標モジュール
平均増分精度と平均忘却率、フェーズごとの精度行列の管理
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from error_handler import MetricsError

logger = logging.getLogger(__name__)


@dataclass
class PhaseRecord:
    """1 フェーズ分の評価結果"""
    phase: int
    task_accuracies: List[float]
    overall: float
    old_accuracy: Optional[float] = None
    new_accuracy: Optional[float] = None
    extras: Dict[str, Any] = field(default_factory=dict)


class MetricsLog:
    """精度行列 a[k][j]（フェーズ k 終了後のタスク j の精度）"""

    def __init__(self):
        self.records: List[PhaseRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, task_accuracies, overall: float, old_accuracy: Optional[float] = None,
               new_accuracy: Optional[float] = None, **extras) -> PhaseRecord:
        phase = len(self.records) + 1
        task_accuracies = [float(a) for a in task_accuracies]
        if len(task_accuracies) != phase:
            raise MetricsError(
                f"フェーズ {phase} の精度行はタスク数 {phase} 個である必要があります: {len(task_accuracies)} 個")
        values = task_accuracies + [float(overall)]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise MetricsError(f"精度は [0, 1] の範囲である必要があります: {values}")
        entry = PhaseRecord(phase, task_accuracies, float(overall), old_accuracy, new_accuracy, dict(extras))
        self.records.append(entry)
        logger.info("フェーズ %d: 全体精度 %.4f タスク別 %s", phase, entry.overall,
                    ", ".join(f"{a:.4f}" for a in task_accuracies))
        return entry

    @property
    def overall(self) -> List[float]:
        return [r.overall for r in self.records]

    def matrix(self) -> np.ndarray:
        """下三角の精度行列（未定義部分は NaN）"""
        n = len(self.records)
        acc = np.full((n, n), np.nan)
        for k, r in enumerate(self.records):
            acc[k, :k + 1] = r.task_accuracies
        return acc

    @classmethod
    def from_matrix(cls, acc, overall) -> "MetricsLog":
        log = cls()
        for k, total in enumerate(overall):
            log.record(list(acc[k][:k + 1]), total)
        return log


def avg_incremental_accuracy(log: MetricsLog) -> float:
    """全フェーズ（第 1 フェーズを含む）の累積精度の平均"""
    if len(log) == 0:
        raise MetricsError("フェーズが記録されていないため平均増分精度を計算できません")
    return float(np.mean(log.overall))


def avg_forgetting(log: MetricsLog) -> float:
    """
    最終フェーズ n における平均忘却率

    f_j = max_{l ∈ [j, n−1]} a[l][j] − a[n][j] を j = 1..n−1 で平均する。
    """
    n = len(log)
    if n < 2:
        raise MetricsError(f"忘却率は 2 フェーズ以上で定義されます: フェーズ数 {n}")
    acc = log.matrix()
    forgetting = [np.max(acc[j:n - 1, j]) - acc[n - 1, j] for j in range(n - 1)]
    return float(np.mean(forgetting))


def csv_header(num_phases: int) -> List[str]:
    return (["phase", "overall_acc"] + [f"task{j}_acc" for j in range(1, num_phases + 1)]
            + ["avg_inc_acc", "avg_forgetting"])


def csv_rows(log: MetricsLog) -> List[List[Any]]:
    """
    フェーズごとの行: phase, overall_acc, タスク別精度..., avg_inc_acc, avg_forgetting

    指標はそのフェーズまでの部分ログで計算し、未定義の値は空欄とする。
    """
    rows = []
    n = len(log)
    for k, r in enumerate(log.records):
        partial = MetricsLog()
        partial.records = log.records[:k + 1]
        tasks = r.task_accuracies + [""] * (n - len(r.task_accuracies))
        forgetting = avg_forgetting(partial) if k >= 1 else ""
        rows.append([r.phase, r.overall, *tasks, avg_incremental_accuracy(partial), forgetting])
    return rows


def summary(log: MetricsLog) -> Dict[str, Any]:
    """metrics.json 用の要約"""
    acc = log.matrix()
    return {
        "accuracy_matrix": [[None if np.isnan(v) else float(v) for v in row] for row in acc],
        "overall": log.overall,
        "old_accuracy": [r.old_accuracy for r in log.records],
        "new_accuracy": [r.new_accuracy for r in log.records],
        "avg_incremental_accuracy": avg_incremental_accuracy(log) if len(log) else None,
        "avg_forgetting": avg_forgetting(log) if len(log) >= 2 else None,
        "phases": [{"phase": r.phase, **r.extras} for r in log.records],
    }
