"""
プログレス管理モジュール
段階的なステータス表示とエポック進捗バーを担当
"""

import logging
from typing import Iterable, Optional

from tqdm import tqdm

logger = logging.getLogger(__name__)


class ProgressManager:
    """プログレス管理クラス"""

    def __init__(self, enabled: bool = True, total_stages: int = 7):
        self.enabled = enabled
        self.total_stages = total_stages
        self.last_status: Optional[str] = None

    def set_status(self, stage: int, text: str, total: Optional[int] = None) -> str:
        """ステータス表示の更新（"3/7 融合中..." の形式）"""
        status = f"{stage}/{total or self.total_stages} {text}"
        self.last_status = status
        logger.info(status)
        return status

    def bar(self, iterable: Iterable, total: Optional[int] = None, desc: str = ""):
        """tqdm の進捗バー（無効時はそのまま反復）"""
        return tqdm(iterable, total=total, desc=desc, leave=False, disable=not self.enabled,
                    dynamic_ncols=True)

    def phase_banner(self, phase: int, num_phases: int, classes) -> None:
        logger.info("===== フェーズ %d/%d: クラス %s =====", phase, num_phases, list(classes))
