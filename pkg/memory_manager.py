"""
メモリ管理モジュール
フェーズごとのメモリ使用量と経過時間の記録
"""

import gc
import logging
import os
import time
from collections import deque
from typing import Any, Dict, List

import psutil

logger = logging.getLogger(__name__)


class MemoryManager:
    """メモリ管理クラス"""

    def __init__(self, max_history: int = 1000):
        self._history = deque(maxlen=max_history)
        self._started = time.perf_counter()

    def get_memory_usage(self) -> Dict[str, float]:
        """現在のメモリ使用量を取得（MB）"""
        try:
            process = psutil.Process(os.getpid())
            memory_info = process.memory_info()
            return {
                'rss': memory_info.rss / 1024 / 1024,
                'vms': memory_info.vms / 1024 / 1024,
                'percent': process.memory_percent(),
                'available': psutil.virtual_memory().available / 1024 / 1024,
            }
        except psutil.Error as e:
            logger.warning("メモリ使用量を取得できません: %s", e)
            return {}

    def snapshot(self, label: str, **context) -> Dict[str, Any]:
        """ラベル付きのスナップショットを記録"""
        entry = {
            'label': label,
            'elapsed_sec': round(time.perf_counter() - self._started, 3),
            **context,
            **self.get_memory_usage(),
        }
        self._history.append(entry)
        logger.debug("memory[%s]: rss=%.1fMB", label, entry.get('rss', float('nan')))
        return entry

    def collect(self) -> int:
        """フェーズ間のガベージコレクション"""
        collected = gc.collect()
        logger.debug("gc.collect: %d objects", collected)
        return collected

    def get_memory_stats(self) -> List[Dict[str, Any]]:
        """記録済みスナップショットの一覧"""
        return list(self._history)
