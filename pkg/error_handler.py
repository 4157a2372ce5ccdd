"""
統一エラーハンドリングモジュール
エンジン全体の例外定義とエラー処理を統一管理
"""

import logging
import sys
from enum import Enum
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ErrorCode(Enum):
    """エラーコード定義"""
    # テンソル演算関連
    SHAPE_MISMATCH = "SHAPE001"
    NUMERIC_ERROR = "NUM001"

    # 構造関連
    INVALID_STATE = "STATE001"
    STRUCTURE_MISMATCH = "STRUCT001"

    # データ関連
    PARSE_FAILED = "DATA001"
    DATA_INVALID = "DATA002"
    LABEL_OUT_OF_RANGE = "DATA003"
    EXEMPLAR_ACCESS = "NECIL001"

    # ファイル関連
    FILE_ACCESS_DENIED = "FILE001"
    FILE_NOT_FOUND = "FILE002"
    CHECKPOINT_CORRUPTED = "CKPT001"

    # 設定関連
    CONFIG_INVALID = "CONF001"

    # 評価関連
    METRICS_UNDEFINED = "METR001"

    # システム関連
    SYSTEM_ERROR = "SYS001"


class EngineError(Exception):
    """エンジン例外の基底クラス"""

    code = ErrorCode.SYSTEM_ERROR

    def __init__(self, message: str, code: Optional[ErrorCode] = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ShapeError(EngineError):
    code = ErrorCode.SHAPE_MISMATCH


class NumericError(EngineError):
    code = ErrorCode.NUMERIC_ERROR


class StateError(EngineError):
    code = ErrorCode.INVALID_STATE


class StructuralError(EngineError):
    code = ErrorCode.STRUCTURE_MISMATCH


class ConfigurationError(EngineError):
    code = ErrorCode.CONFIG_INVALID


class ParseError(EngineError):
    """バイナリ解析エラー（失敗位置のオフセットを保持）"""

    code = ErrorCode.PARSE_FAILED

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset={offset})")
        self.offset = offset


class DataError(EngineError):
    code = ErrorCode.DATA_INVALID


class LabelRangeError(EngineError):
    code = ErrorCode.LABEL_OUT_OF_RANGE


class ExemplarAccessError(EngineError):
    """現フェーズ外のクラスへのアクセス（旧クラスのサンプル保持は禁止）"""

    code = ErrorCode.EXEMPLAR_ACCESS


class CheckpointError(EngineError):
    code = ErrorCode.CHECKPOINT_CORRUPTED


class MetricsError(EngineError):
    code = ErrorCode.METRICS_UNDEFINED


_USER_MESSAGES = {
    ErrorCode.SHAPE_MISMATCH: "テンソルの形状が一致しません。",
    ErrorCode.NUMERIC_ERROR: "数値計算が定義域を外れました。",
    ErrorCode.INVALID_STATE: "モデルの状態が操作の前提を満たしていません。",
    ErrorCode.STRUCTURE_MISMATCH: "主枝とアダプタの構造が一致しません。",
    ErrorCode.PARSE_FAILED: "データファイルの解析に失敗しました。",
    ErrorCode.DATA_INVALID: "データセットが不正です。",
    ErrorCode.LABEL_OUT_OF_RANGE: "ラベルがクラス数の範囲外です。",
    ErrorCode.EXEMPLAR_ACCESS: "現フェーズ外のクラスのサンプルにはアクセスできません。",
    ErrorCode.FILE_ACCESS_DENIED: "ファイルにアクセスできません。",
    ErrorCode.FILE_NOT_FOUND: "ファイルが見つかりません。",
    ErrorCode.CHECKPOINT_CORRUPTED: "チェックポイントが破損している可能性があります。",
    ErrorCode.CONFIG_INVALID: "設定値が無効です。",
    ErrorCode.METRICS_UNDEFINED: "指標を計算できません。",
    ErrorCode.SYSTEM_ERROR: "システムエラーが発生しました。",
}

# CLI の終了コード
EXIT_CODES = {
    ErrorCode.CONFIG_INVALID: 2,
    ErrorCode.FILE_NOT_FOUND: 2,
    ErrorCode.FILE_ACCESS_DENIED: 2,
    ErrorCode.CHECKPOINT_CORRUPTED: 3,
    ErrorCode.PARSE_FAILED: 3,
}


class ErrorHandler:
    """統一エラーハンドリングクラス"""

    def handle_error(self,
                     error_code: ErrorCode,
                     error: Exception,
                     context: Optional[Dict[str, Any]] = None,
                     show_user_message: bool = True) -> int:
        """
        エラーの統一処理

        Args:
            error_code: エラーコード
            error: 例外オブジェクト
            context: エラー発生時のコンテキスト情報
            show_user_message: 標準エラー出力に診断を表示するか

        Returns:
            int: CLI 用の終了コード
        """
        self._log_error(error_code, error, context)
        if show_user_message:
            self._show_user_message(error_code, error)
        return EXIT_CODES.get(error_code, 1)

    def handle_exception(self, error: Exception, context: Optional[Dict[str, Any]] = None,
                         show_user_message: bool = True) -> int:
        """例外の種類からエラーコードを決定して処理"""
        if isinstance(error, EngineError):
            code = error.code
        elif isinstance(error, FileNotFoundError):
            code = ErrorCode.FILE_NOT_FOUND
        elif isinstance(error, PermissionError):
            code = ErrorCode.FILE_ACCESS_DENIED
        else:
            code = ErrorCode.SYSTEM_ERROR
        return self.handle_error(code, error, context, show_user_message)

    def _log_error(self, error_code: ErrorCode, error: Exception, context: Optional[Dict[str, Any]]):
        """エラーログの記録"""
        if error_code == ErrorCode.SYSTEM_ERROR:
            logger.error("[%s] %s context=%s", error_code.value, error, context or {}, exc_info=error)
        else:
            logger.error("[%s] %s context=%s", error_code.value, error, context or {})

    def _show_user_message(self, error_code: ErrorCode, error: Exception):
        """ユーザー向けエラーメッセージの表示"""
        message = _USER_MESSAGES.get(error_code, "予期しないエラーが発生しました。")
        print(f"エラー ({error_code.value}): {message}\n  詳細: {error}", file=sys.stderr)


# グローバルエラーハンドラーインスタンス
error_handler = ErrorHandler()
