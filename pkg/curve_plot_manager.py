"""
曲線描画モジュール
フェーズごとの精度推移と σ 掃引の曲線を PNG で保存
"""

import logging
import os
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


class CurvePlotManager:
    """曲線描画クラス"""

    def __init__(self):
        self._plot_modules = None

    def _ensure_plot_modules(self):
        """matplotlib を非対話バックエンドで遅延読み込み"""
        if self._plot_modules is None:
            import matplotlib
            matplotlib.use("Agg", force=True)
            import matplotlib.pyplot as plt
            self._plot_modules = {"plt": plt}
        return self._plot_modules

    def draw_accuracy_curve(self, log, path: str, title: Optional[str] = None) -> str:
        """全体・旧クラス・新クラス精度のフェーズ推移"""
        plt = self._ensure_plot_modules()["plt"]
        phases = [r.phase for r in log.records]
        fig, ax = plt.subplots(figsize=(8, 5))
        ax.plot(phases, [r.overall for r in log.records], "b-o", linewidth=2, label="overall")
        old = [(r.phase, r.old_accuracy) for r in log.records if r.old_accuracy is not None]
        if old:
            ax.plot(*zip(*old), "g--s", label="old classes")
        ax.plot(phases, [r.new_accuracy for r in log.records], "r:^", label="new classes")

        ax.set_xlabel("Phase", fontsize=12)
        ax.set_ylabel("Top-1 accuracy", fontsize=12)
        ax.set_title(title or "Accuracy per phase", fontsize=14, fontweight="bold")
        ax.set_xticks(phases)
        ax.set_ylim(0, 1)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower left", fontsize=10)
        return self._save(fig, plt, path)

    def draw_sigma_sweep(self, rows: List[Dict[str, float]], path: str) -> str:
        """σ と平均増分精度"""
        if not rows:
            raise ValueError("σ 掃引の結果が空です")
        plt = self._ensure_plot_modules()["plt"]
        ordered = sorted(rows, key=lambda r: r["sigma"])
        sigmas = [r["sigma"] for r in ordered]
        values = [r["avg_inc_acc"] for r in ordered]
        fig, ax = plt.subplots(figsize=(8, 5))
        ax.plot(sigmas, values, "b-o", linewidth=2)
        best = max(range(len(values)), key=values.__getitem__)
        ax.scatter([sigmas[best]], [values[best]], color="red", s=100, zorder=5,
                   label=f"peak σ={sigmas[best]:.2f}")
        ax.set_xlabel("Selection threshold σ", fontsize=12)
        ax.set_ylabel("Average incremental accuracy", fontsize=12)
        ax.set_title("Threshold sweep", fontsize=14, fontweight="bold")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right", fontsize=10)
        return self._save(fig, plt, path)

    def _save(self, fig, plt, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        try:
            fig.tight_layout()
            fig.savefig(path, dpi=100)
        finally:
            plt.close(fig)
        logger.info("グラフを保存しました: %s", path)
        return path
