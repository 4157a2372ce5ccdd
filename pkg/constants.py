"""
定数定義モジュール
数値計算・データ形式・学習プロトコル関連の定数を定義
"""


class EngineConstants:
    """数値計算と学習プロトコル関連の定数定義"""

    # 精度モード
    PRECISIONS = ("float32", "float64")
    DEFAULT_PRECISION = "float32"

    # BatchNorm の既定値（ResNet 系の慣例値）
    BN_MOMENTUM = 0.1
    BN_EPS = 1e-5

    # Adam の既定値
    ADAM_BETAS = (0.9, 0.999)
    ADAM_EPS = 1e-8

    # 勾配検査
    GRAD_CHECK_STEP = 1e-5
    GRAD_CHECK_FLOOR = 1e-8

    # 分類器の新規行の初期化幅
    CLASSIFIER_INIT_RANGE = 1e-2

    # 融合の許容誤差（精度別）
    FUSION_TOLERANCE = {
        "float32": 1e-5,
        "float64": 1e-10,
    }

    # 評価時のバッチサイズ
    EVAL_BATCH_SIZE = 256


class DataConstants:
    """データ形式関連の定数定義"""

    # CIFAR-100 バイナリ: 粗ラベル 1 byte + 細ラベル 1 byte + 3x32x32 画素
    CIFAR_IMAGE_SHAPE = (3, 32, 32)
    CIFAR_PIXEL_BYTES = 3 * 32 * 32
    CIFAR_RECORD_BYTES = 2 + CIFAR_PIXEL_BYTES
    CIFAR_FINE_CLASSES = 100
    CIFAR_COARSE_CLASSES = 20
    CIFAR_TRAIN_FILE = "train.bin"
    CIFAR_TEST_FILE = "test.bin"

    # 読み込みファイルサイズ上限（CIFAR-100 train.bin は約 154MB）
    MAX_DATA_FILE_BYTES = 512 * 1024 * 1024


# 出力ファイル名
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
RESOURCES_JSON = "resources.json"
SWEEP_CSV = "sigma_sweep.csv"
ABLATION_CSV = "ablation_summary.csv"
RUN_LOG = "run.log"
CHECKPOINT_FORMAT = "expand-fuse-checkpoint"
CHECKPOINT_VERSION = 1
