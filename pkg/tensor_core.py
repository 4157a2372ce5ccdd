"""
テンソル演算モジュール
小規模 CNN 学習に必要な密テンソル演算とテープ方式の逆伝播を提供
"""

import logging
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax

from constants import EngineConstants
from error_handler import ConfigurationError, LabelRangeError, NumericError, ShapeError, StateError

logger = logging.getLogger(__name__)

_PRECISION_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}

_state = {
    "precision": EngineConstants.DEFAULT_PRECISION,
    "grad_enabled": True,
}


# ----------------------------------------------------------------------
# 精度・勾配モード
# ----------------------------------------------------------------------
def set_precision(name: str) -> None:
    """演算精度の切り替え（float32: 学習 / float64: 検証）"""
    if name not in _PRECISION_DTYPES:
        raise ConfigurationError(f"未知の精度です: {name}")
    _state["precision"] = name


def get_precision() -> str:
    return _state["precision"]


def get_dtype():
    return _PRECISION_DTYPES[_state["precision"]]


@contextmanager
def precision(name: str):
    """一時的に精度を切り替えるコンテキスト"""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextmanager
def no_grad():
    """テープを記録しない区間"""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


# ----------------------------------------------------------------------
# テンソル本体
# ----------------------------------------------------------------------
class TapeNode:
    """逆伝播用のテープノード（演算種別・入力・逆伝播規則）"""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """値と勾配を保持する密テンソル（行優先の連続配列）"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype(), order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[TapeNode] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """演算結果をコピーせずに包む"""
        out = cls.__new__(cls)
        out.data = np.asarray(array, order="C")
        out.grad = None
        out.requires_grad = requires_grad
        out._node = None
        return out

    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item はスカラーにのみ使えます: shape={self.shape}")
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """逆トポロジカル順にテープを一度ずつ辿り、葉に勾配を蓄積する"""
        if not self.requires_grad:
            raise StateError("requires_grad=False のテンソルからは逆伝播できません")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"スカラー以外の逆伝播には勾配が必要です: shape={self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for tensor in reversed(order):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            for inp, in_grad in zip(node.inputs, node.backward_fn(g)):
                if in_grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = in_grad if key not in grads else grads[key] + in_grad
        # テープは1ステップで破棄
        for tensor in order:
            tensor._node = None

    # 演算子
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def _topological_order(root: Tensor):
    """反復 DFS による後行順（各ノード一度だけ）"""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for inp in tensor._node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def zero_scalar() -> Tensor:
    """勾配を持たない 0 スカラー（空マスク時の損失）"""
    return Tensor(0.0)


def _make(data: np.ndarray, inputs: Tuple[Tensor, ...], op: str,
          backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=requires)
    if requires:
        out._node = TapeNode(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで増えた次元を足し戻す"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# 要素演算
# ----------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: 形状 {a.shape} と {b.shape} はブロードキャストできません") from exc
    return _make(out, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: 形状 {a.shape} と {b.shape} はブロードキャストできません") from exc
    return _make(out, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: 形状 {a.shape} と {b.shape} はブロードキャストできません") from exc
    return _make(out, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu",
                 lambda g: (g * mask,))


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), "sum", backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose は2次元のみ対応: {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """行の抽出（マスク付き損失用）"""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), "take_rows", backward)


def row_norm(a: Tensor) -> Tensor:
    """行ごとの L2 ノルム（ノルム 0 の行の勾配は 0）"""
    norms = np.sqrt((a.data * a.data).sum(axis=1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1)
        factor = np.where(norms > 0, g / safe, 0)
        return ((a.data * factor[:, None]).astype(a.data.dtype),)

    return _make(norms, (a,), "row_norm", backward)


# ----------------------------------------------------------------------
# 行列演算
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """行列積 C = A·B（dA = dC·Bᵀ, dB = Aᵀ·dC）"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: 形状 {a.shape} と {b.shape} の内側の次元が一致しません")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x·Wᵀ + b（W は [出力, 入力]）"""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# ----------------------------------------------------------------------
# 畳み込み
# ----------------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kernel: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    n, c = xp.shape[:2]
    # [N, Ho, Wo, C, k, k] -> [N*Ho*Wo, C*k*k]
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h_out * w_out, c * kernel * kernel)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """相互相関による 2 次元畳み込み（im2col + 行列積）"""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: 入力 {x.shape} と重み {weight.shape} は4次元である必要があります")
    n, c_in, height, width = x.shape
    c_out, w_in, k_h, k_w = weight.shape
    if w_in != c_in or k_h != k_w:
        raise ShapeError(f"conv2d: 入力 {x.shape} と重み {weight.shape} のチャネル/カーネルが不整合です")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: バイアス {bias.shape} と重み {weight.shape} が不整合です")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride={stride}, padding={padding} は無効です")
    kernel = k_h
    h_out = conv_output_size(height, kernel, stride, padding)
    w_out = conv_output_size(width, kernel, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(
            f"conv2d: 出力サイズが正になりません (H={height}, W={width}, k={kernel}, "
            f"stride={stride}, padding={padding})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kernel, stride, h_out, w_out)
    w_mat = weight.data.reshape(c_out, -1)
    out = cols @ w_mat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grad_w = (g_mat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        grad_b = g_mat.sum(axis=0) if bias is not None else None
        grad_x = None
        if x.requires_grad:
            d_cols = (g_mat @ w_mat).reshape(n, h_out, w_out, c_in, kernel, kernel)
            d_xp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kernel):
                for j in range(kernel):
                    d_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = d_xp[:, :, padding:padding + height, padding:padding + width] if padding else d_xp
        return grad_x, grad_w, grad_b

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _make(out, inputs, "conv2d", lambda g: backward(g)[:2])
    return _make(out, inputs, "conv2d", backward)


# ----------------------------------------------------------------------
# 正規化・プーリング
# ----------------------------------------------------------------------
def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                eps: float = EngineConstants.BN_EPS, training: bool = False,
                momentum: float = EngineConstants.BN_MOMENTUM) -> Tensor:
    """
    チャネル単位の BatchNorm

    training=True ではバッチ統計で正規化し、running 統計を momentum で更新する。
    training=False では y = (x−μ)·(γ/sqrt(v+eps)) + β。
    """
    if x.data.ndim != 4 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batchnorm2d: 入力 {x.shape} と γ {gamma.shape} / β {beta.shape} のチャネルが不一致です")
    if running_mean.shape != gamma.shape or running_var.shape != gamma.shape:
        raise ShapeError("batchnorm2d: running 統計の形状が γ と一致しません")
    if eps < 0:
        raise NumericError(f"batchnorm2d: eps={eps} は負にできません")
    shape = (1, -1, 1, 1)
    if not training:
        denom = np.sqrt(running_var + eps)
        scale_c = gamma.data / denom
        centered = x.data - running_mean.reshape(shape)
        out = centered * scale_c.reshape(shape) + beta.data.reshape(shape)

        def backward_eval(g):
            grad_x = g * scale_c.reshape(shape)
            grad_gamma = (g * centered / denom.reshape(shape)).sum(axis=(0, 2, 3))
            grad_beta = g.sum(axis=(0, 2, 3))
            return grad_x, grad_gamma, grad_beta

        return _make(out.astype(x.data.dtype), (x, gamma, beta), "batchnorm2d_eval", backward_eval)

    if x.shape[0] == 0:
        raise NumericError("batchnorm2d: 学習モードで空のバッチは正規化できません")
    if eps <= 0:
        raise NumericError(f"batchnorm2d: 学習モードでは eps > 0 が必要です (eps={eps})")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    unbiased = var * count / (count - 1) if count > 1 else var
    running_mean *= (1.0 - momentum)
    running_mean += momentum * mu
    running_var *= (1.0 - momentum)
    running_var += momentum * unbiased

    def backward_train(g):
        d_hat = g * gamma.data.reshape(shape)
        sum_d = d_hat.sum(axis=(0, 2, 3)).reshape(shape)
        sum_dx = (d_hat * x_hat).sum(axis=(0, 2, 3)).reshape(shape)
        grad_x = inv_std.reshape(shape) / count * (count * d_hat - sum_d - x_hat * sum_dx)
        grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        return grad_x, grad_gamma, grad_beta

    return _make(out.astype(x.data.dtype), (x, gamma, beta), "batchnorm2d_train", backward_train)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: 入力は4次元である必要があります: {x.shape}")
    area = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).astype(x.data.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", backward)


# ----------------------------------------------------------------------
# 損失
# ----------------------------------------------------------------------
def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(
            f"ラベル範囲外: [{labels.min()}, {labels.max()}] はクラス数 {num_classes} の範囲 [0, {num_classes}) にありません")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """バッチ平均のソフトマックス交差エントロピー（最大値減算で安定化）"""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: ロジットは2次元である必要があります: {logits.shape}")
    n, k = logits.shape
    labels = check_labels(labels, k)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: ラベル {labels.shape} とロジット {logits.shape} が不一致です")
    if n == 0:
        raise ShapeError("softmax_cross_entropy: 空のバッチです")
    log_p = log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return ((grad * (g / n)).astype(logits.data.dtype),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), "softmax_cross_entropy", backward)


# ----------------------------------------------------------------------
# 勾配検査
# ----------------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               h: float = EngineConstants.GRAD_CHECK_STEP) -> float:
    """
    中心差分と逆伝播勾配の最大相対誤差

    Args:
        f: x を受け取りスカラー Tensor を返す微分可能関数
        x: 評価点（float64 の葉テンソル）
        h: 差分の刻み幅

    Returns:
        float: 最大相対誤差 |a−n| / max(|a|+|n|, floor)
    """
    if get_precision() != "float64" or x.data.dtype != np.float64:
        raise StateError("grad_check は float64 精度でのみ実行できます")
    x.requires_grad = True
    x.zero_grad()
    value = f(x)
    if value.requires_grad:
        value.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = f(x).item()
            flat[i] = original - h
            f_minus = f(x).item()
            flat[i] = original
            flat_numeric[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), EngineConstants.GRAD_CHECK_FLOOR)
    error = float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0
    logger.debug("grad_check: size=%d max_rel_err=%.3e", x.data.size, error)
    return error
