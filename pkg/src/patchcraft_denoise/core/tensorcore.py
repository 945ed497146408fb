"""
张量核心模块, 包含网络所需的全部数值原语(前向与反向)、参数库以及有限差分梯度校验

张量即行优先的numpy数组。所有原语接受任意数量的前导维度(批次/分组),
卷积核的前导维度按numpy广播规则与输入对齐, 因此一个调用即可处理SepConv的全部分组。
"""

import hashlib
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..utils.data_types import Tensor
from ..utils.logger import get_logger

logger = get_logger("tensorcore")

_DTYPE = np.float32
_SPATIAL = "pqr"
_KERNEL = "xyz"


class TensorCoreError(Exception):
    """张量核心相关异常类"""
    pass


class ShapeError(TensorCoreError, ValueError):
    """形状不匹配异常"""
    pass


class GraphError(TensorCoreError):
    """计算图使用顺序错误(例如未前向即反向)"""
    pass


class NumericError(TensorCoreError):
    """出现非有限值(NaN/Inf)"""
    pass


def get_dtype():
    """当前计算精度"""
    return _DTYPE


@contextmanager
def precision(dtype) -> Iterator[None]:
    """
    临时切换计算精度, 校验时使用 np.float64

    Args:
        dtype: np.float32 或 np.float64
    """
    global _DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorCoreError(f"仅支持float32/float64精度, 实际: {dtype}")
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def as_tensor(data) -> Tensor:
    """转换为当前精度的张量"""
    return np.asarray(data, dtype=_DTYPE)


def check_finite(name: str, tensor: Tensor) -> None:
    if not np.all(np.isfinite(tensor)):
        raise NumericError(f"{name} 含有非有限值(NaN/Inf)")


def _sum_to_shape(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """将广播产生的梯度求和回原始形状"""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# 卷积
# ---------------------------------------------------------------------------

def _check_conv(x: Tensor, w: Tensor, b: Tensor, nd: int, op: str) -> None:
    if x.ndim < nd + 1:
        raise ShapeError(f"{op}: 输入至少需要 {nd + 1} 维(通道 + 空间), 实际形状 {x.shape}")
    if w.ndim < nd + 2:
        raise ShapeError(f"{op}: 卷积核至少需要 {nd + 2} 维, 实际形状 {w.shape}")
    c_in = x.shape[-nd - 1]
    if w.shape[-nd - 1] != c_in:
        raise ShapeError(f"{op}: 输入通道维 Cin 不一致, 输入 {c_in}, 卷积核 {w.shape[-nd - 1]}")
    for axis, k in enumerate(w.shape[-nd:]):
        if k % 2 == 0:
            raise ShapeError(f"{op}: 卷积核第 {axis} 个空间维边长必须为奇数, 实际 {k}")
    if b.shape[-1:] != w.shape[-nd - 2:-nd - 1]:
        raise ShapeError(f"{op}: 偏置维 Cout 与卷积核不一致, 偏置 {b.shape}, 卷积核 {w.shape}")
    try:
        np.broadcast_shapes(x.shape[:-nd - 1], w.shape[:-nd - 2], b.shape[:-1])
    except ValueError:
        raise ShapeError(f"{op}: 分组前导维无法广播, 输入 {x.shape[:-nd - 1]}, 卷积核 {w.shape[:-nd - 2]}")


def _conv_forward(x: Tensor, w: Tensor, b: Tensor, pads: Sequence[int]) -> Tensor:
    nd = len(pads)
    xp = np.pad(x, [(0, 0)] * (x.ndim - nd) + [(p, p) for p in pads])
    cols = sliding_window_view(xp, w.shape[-nd:], axis=tuple(range(-nd, 0)))
    sp, kk = _SPATIAL[:nd], _KERNEL[:nd]
    out = np.einsum(f"...i{sp}{kk},...oi{kk}->...o{sp}",
                    cols.astype(np.float64), w.astype(np.float64))
    out += b.astype(np.float64).reshape(b.shape + (1,) * nd)
    return out.astype(_DTYPE)


def _conv_backward(x: Tensor, w: Tensor, b: Tensor, pads: Sequence[int],
                   grad_out: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    nd = len(pads)
    ksize = w.shape[-nd:]
    xp = np.pad(x, [(0, 0)] * (x.ndim - nd) + [(p, p) for p in pads]).astype(np.float64)
    cols = sliding_window_view(xp, ksize, axis=tuple(range(-nd, 0)))
    g = grad_out.astype(np.float64)
    sp, kk = _SPATIAL[:nd], _KERNEL[:nd]

    grad_w = np.einsum(f"...i{sp}{kk},...o{sp}->...oi{kk}", cols, g)
    grad_b = g.sum(axis=tuple(range(-nd, 0)))
    grad_cols = np.einsum(f"...o{sp},...oi{kk}->...i{sp}{kk}", g, w.astype(np.float64))

    # col2im: 按卷积核位置固定顺序累加, 保证结果确定
    lead = grad_cols.shape[:-2 * nd]
    grad_xp = np.zeros(lead + xp.shape[-nd:], dtype=np.float64)
    out_sizes = grad_cols.shape[-2 * nd:-nd]
    for index in np.ndindex(*ksize):
        target = (Ellipsis,) + tuple(slice(k, k + n) for k, n in zip(index, out_sizes))
        grad_xp[target] += grad_cols[(Ellipsis,) + index]
    crop = (Ellipsis,) + tuple(slice(p, grad_xp.shape[-nd + i] - p) for i, p in enumerate(pads))
    grad_x = grad_xp[crop]

    return (_sum_to_shape(grad_x, x.shape).astype(_DTYPE),
            _sum_to_shape(grad_w, w.shape).astype(_DTYPE),
            _sum_to_shape(grad_b, b.shape).astype(_DTYPE))


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int) -> Tensor:
    """
    二维互相关(不翻转卷积核)

    Args:
        x: 输入 (..., Cin, H, W)
        w: 卷积核 (..., Cout, Cin, kh, kw), 前导维与输入广播
        b: 偏置 (..., Cout)
        pad: 空间零填充量, 取0或(k-1)/2

    Returns:
        输出 (..., Cout, H', W')
    """
    _check_conv(x, w, b, 2, "conv2d")
    kh, kw = w.shape[-2:]
    if pad not in (0, (kh - 1) // 2) or (pad != 0 and kh != kw):
        raise ShapeError(f"conv2d: 填充量 pad={pad} 必须为0或(k-1)/2, 卷积核 {kh}x{kw}")
    if pad == 0 and (x.shape[-2] < kh or x.shape[-1] < kw):
        raise ShapeError(f"conv2d: 空间维 H/W {x.shape[-2:]} 小于卷积核 {kh}x{kw}")
    return _conv_forward(x, w, b, (pad, pad))


def conv2d_backward(x: Tensor, w: Tensor, b: Tensor, pad: int,
                    grad_out: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """conv2d的反向传播, 返回 (grad_x, grad_w, grad_b)"""
    return _conv_backward(x, w, b, (pad, pad), grad_out)


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    三维互相关: 时间维不填充, 空间维零填充(k-1)/2

    Args:
        x: 输入 (..., Cin, T, H, W)
        w: 卷积核 (..., Cout, Cin, kt, kh, kw)
        b: 偏置 (..., Cout)

    Returns:
        输出 (..., Cout, T-kt+1, H, W)
    """
    _check_conv(x, w, b, 3, "conv3d")
    kt, kh, kw = w.shape[-3:]
    if x.shape[-3] < kt:
        raise ShapeError(f"conv3d: 时间维 T={x.shape[-3]} 小于卷积核时间长度 kt={kt}")
    return _conv_forward(x, w, b, (0, (kh - 1) // 2, (kw - 1) // 2))


def conv3d_backward(x: Tensor, w: Tensor, b: Tensor,
                    grad_out: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """conv3d的反向传播, 返回 (grad_x, grad_w, grad_b)"""
    kh, kw = w.shape[-2:]
    return _conv_backward(x, w, b, (0, (kh - 1) // 2, (kw - 1) // 2), grad_out)


# ---------------------------------------------------------------------------
# 激活、归一化与损失
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(_DTYPE)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(x > 0, grad_out, 0).astype(_DTYPE)


def lrelu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0 < slope < 1:
        raise TensorCoreError(f"LReLU斜率必须在(0,1)之间: {slope}")
    return np.where(x >= 0, x, slope * x).astype(_DTYPE)


def lrelu_backward(x: Tensor, grad_out: Tensor, slope: float = 0.1) -> Tensor:
    return np.where(x >= 0, grad_out, slope * grad_out).astype(_DTYPE)


def _bn_axes(x: Tensor, channel_axes: Tuple[int, ...]) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    channel_axes = tuple(a % x.ndim for a in channel_axes)
    reduce_axes = tuple(a for a in range(x.ndim) if a not in channel_axes)
    param_shape = tuple(x.shape[a] for a in channel_axes)
    return reduce_axes, param_shape


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, channel_axes: Tuple[int, ...],
              running_mean: Tensor, running_var: Tensor, training: bool,
              momentum: float = 0.1, eps: float = 1e-5) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """
    批归一化: 对channel_axes之外的全部轴(批次 x 空间)做归一化, 再做可学习仿射

    Args:
        x: 输入
        gamma, beta: 仿射参数, 形状为x在channel_axes上的尺寸
        channel_axes: 通道类轴
        running_mean, running_var: 累积统计量, 训练模式下原地更新
        training: 训练模式使用批统计量, 推理模式使用累积统计量
        momentum: 累积统计量动量
        eps: 方差稳定项

    Returns:
        (输出, 反向传播所需缓存)
    """
    reduce_axes, param_shape = _bn_axes(x, channel_axes)
    if gamma.shape != param_shape or beta.shape != param_shape:
        raise ShapeError(f"batchnorm: 仿射参数形状 {gamma.shape} 与通道形状 {param_shape} 不一致")
    bshape = tuple(1 if a in reduce_axes else x.shape[a] for a in range(x.ndim))
    xd = x.astype(np.float64)
    population = int(np.prod([x.shape[a] for a in reduce_axes]))

    if training:
        if population < 2:
            raise ShapeError(f"batchnorm: 训练模式下归一化样本数必须>=2, 实际 {population}")
        mean = xd.mean(axis=reduce_axes)
        var = xd.var(axis=reduce_axes)
        unbiased = var * population / (population - 1)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        running_var *= (1 - momentum)
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.astype(np.float64).reshape(bshape) * xhat + beta.astype(np.float64).reshape(bshape)
    cache = {"xhat": xhat, "inv_std": inv_std, "bshape": bshape,
             "reduce_axes": reduce_axes, "population": population, "training": training}
    return out.astype(_DTYPE), cache


def batchnorm_backward(gamma: Tensor, cache: Dict, grad_out: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """批归一化的反向传播, 返回 (grad_x, grad_gamma, grad_beta)"""
    xhat, inv_std, bshape = cache["xhat"], cache["inv_std"], cache["bshape"]
    axes, population = cache["reduce_axes"], cache["population"]
    g = grad_out.astype(np.float64)

    grad_gamma = (g * xhat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    dxhat = g * gamma.astype(np.float64).reshape(bshape)
    if cache["training"]:
        grad_x = (inv_std.reshape(bshape) / population) * (
            population * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
    else:
        grad_x = dxhat * inv_std.reshape(bshape)
    return grad_x.astype(_DTYPE), grad_gamma.astype(_DTYPE), grad_beta.astype(_DTYPE)


def mse_loss(pred: Tensor, target: Tensor) -> Tuple[float, Tensor]:
    """
    均方误差

    Returns:
        (损失值, 对pred的梯度 2(pred-target)/N)
    """
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: 形状不一致, pred {pred.shape}, target {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(_DTYPE)


# ---------------------------------------------------------------------------
# 参数库
# ---------------------------------------------------------------------------

def kaiming_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    """按fan-in缩放的正态初始化"""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(_DTYPE)


class ParamBank:
    """参数库: 每个条目保存取值、梯度与两个矩估计; buffers保存不可训练的状态(如BN累积统计量)"""

    def __init__(self):
        self._values: Dict[str, Tensor] = {}
        self._grads: Dict[str, Tensor] = {}
        self._moments: Dict[str, Tuple[Tensor, Tensor]] = {}
        self._buffers: Dict[str, Tensor] = {}

    def add(self, name: str, value: Tensor) -> None:
        if name in self._values:
            raise KeyError(f"参数重复注册: {name}")
        value = as_tensor(value).copy()
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        self._moments[name] = (np.zeros_like(value), np.zeros_like(value))

    def add_buffer(self, name: str, value: Tensor) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64).copy()

    def names(self) -> List[str]:
        return list(self._values.keys())

    def buffer_names(self) -> List[str]:
        return list(self._buffers.keys())

    def value(self, name: str) -> Tensor:
        return self._values[name]

    def set_value(self, name: str, value: Tensor) -> None:
        if value.shape != self._values[name].shape:
            raise ShapeError(f"参数 {name} 形状不一致: {value.shape} != {self._values[name].shape}")
        self._values[name] = as_tensor(value).copy()

    def grad(self, name: str) -> Tensor:
        return self._grads[name]

    def moments(self, name: str) -> Tuple[Tensor, Tensor]:
        return self._moments[name]

    def set_moments(self, name: str, m: Tensor, v: Tensor) -> None:
        self._moments[name] = (m, v)

    def buffer(self, name: str) -> Tensor:
        return self._buffers[name]

    def set_buffer(self, name: str, value: Tensor) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64).copy()

    def accumulate(self, name: str, grad: Tensor) -> None:
        if grad.shape != self._values[name].shape:
            raise ShapeError(f"参数 {name} 梯度形状不一致: {grad.shape} != {self._values[name].shape}")
        self._grads[name] = self._grads[name] + grad

    def zero_grad(self) -> None:
        for name in self._grads:
            self._grads[name] = np.zeros_like(self._values[name])

    def total_parameter_count(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"param/{k}": v for k, v in self._values.items()}
        state.update({f"buffer/{k}": v for k, v in self._buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """按名称载入取值与缓冲区, 名称集合必须完全一致"""
        expected = set(self.state_dict().keys())
        if set(state.keys()) != expected:
            missing = sorted(expected - set(state.keys()))
            unknown = sorted(set(state.keys()) - expected)
            raise ShapeError(f"参数集合不一致, 缺少: {missing}, 多余: {unknown}")
        for key, value in state.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                self.set_value(name, value)
            else:
                if value.shape != self._buffers[name].shape:
                    raise ShapeError(f"缓冲区 {name} 形状不一致: {value.shape}")
                self.set_buffer(name, value)

    def digest(self) -> str:
        """参数与缓冲区内容的SHA-256摘要"""
        sha = hashlib.sha256()
        for key, value in sorted(self.state_dict().items()):
            sha.update(key.encode("utf-8"))
            sha.update(np.ascontiguousarray(value).tobytes())
        return sha.hexdigest()


# ---------------------------------------------------------------------------
# 固定算子集合上的计算图
# ---------------------------------------------------------------------------

class Op:
    """可微算子基类: 前向时保存上下文, 反向时返回输入梯度并把参数梯度累加到参数库"""

    def __init__(self, name: str):
        self.name = name
        self.training = True
        self._ctx: Optional[Dict] = None

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def _pop_ctx(self) -> Dict:
        if self._ctx is None:
            raise GraphError(f"{self.name}: 在前向传播之前调用了反向传播")
        ctx, self._ctx = self._ctx, None
        return ctx


class Conv2d(Op):
    """二维卷积, 参数 <name>.weight / <name>.bias"""

    def __init__(self, bank: ParamBank, name: str, pad: int):
        super().__init__(name)
        self.bank = bank
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        w, b = self.bank.value(f"{self.name}.weight"), self.bank.value(f"{self.name}.bias")
        self._ctx = {"x": x}
        return conv2d(x, w, b, self.pad)

    def backward(self, grad: Tensor) -> Tensor:
        ctx = self._pop_ctx()
        w, b = self.bank.value(f"{self.name}.weight"), self.bank.value(f"{self.name}.bias")
        grad_x, grad_w, grad_b = conv2d_backward(ctx["x"], w, b, self.pad, grad)
        self.bank.accumulate(f"{self.name}.weight", grad_w)
        self.bank.accumulate(f"{self.name}.bias", grad_b)
        return grad_x


class Conv3d(Op):
    """三维卷积, 时间维不填充"""

    def __init__(self, bank: ParamBank, name: str):
        super().__init__(name)
        self.bank = bank

    def forward(self, x: Tensor) -> Tensor:
        w, b = self.bank.value(f"{self.name}.weight"), self.bank.value(f"{self.name}.bias")
        self._ctx = {"x": x}
        return conv3d(x, w, b)

    def backward(self, grad: Tensor) -> Tensor:
        ctx = self._pop_ctx()
        w, b = self.bank.value(f"{self.name}.weight"), self.bank.value(f"{self.name}.bias")
        grad_x, grad_w, grad_b = conv3d_backward(ctx["x"], w, b, grad)
        self.bank.accumulate(f"{self.name}.weight", grad_w)
        self.bank.accumulate(f"{self.name}.bias", grad_b)
        return grad_x


class ReLU(Op):

    def forward(self, x: Tensor) -> Tensor:
        self._ctx = {"x": x}
        return relu(x)

    def backward(self, grad: Tensor) -> Tensor:
        return relu_backward(self._pop_ctx()["x"], grad)


class LeakyReLU(Op):

    def __init__(self, name: str, slope: float = 0.1):
        super().__init__(name)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        self._ctx = {"x": x}
        return lrelu(x, self.slope)

    def backward(self, grad: Tensor) -> Tensor:
        return lrelu_backward(self._pop_ctx()["x"], grad, self.slope)


class BatchNorm(Op):
    """批归一化, 参数 <name>.gamma / <name>.beta, 缓冲区 <name>.running_mean / <name>.running_var"""

    def __init__(self, bank: ParamBank, name: str, channel_axes: Tuple[int, ...],
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(name)
        self.bank = bank
        self.channel_axes = channel_axes
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        gamma, beta = self.bank.value(f"{self.name}.gamma"), self.bank.value(f"{self.name}.beta")
        out, cache = batchnorm(x, gamma, beta, self.channel_axes,
                               self.bank.buffer(f"{self.name}.running_mean"),
                               self.bank.buffer(f"{self.name}.running_var"),
                               self.training, self.momentum, self.eps)
        self._ctx = cache
        return out

    def backward(self, grad: Tensor) -> Tensor:
        cache = self._pop_ctx()
        grad_x, grad_gamma, grad_beta = batchnorm_backward(
            self.bank.value(f"{self.name}.gamma"), cache, grad)
        self.bank.accumulate(f"{self.name}.gamma", grad_gamma)
        self.bank.accumulate(f"{self.name}.beta", grad_beta)
        return grad_x


class OpGraph:
    """按顺序执行的算子链, backward按逆序调用各算子"""

    def __init__(self, ops: Optional[List[Op]] = None):
        self.ops: List[Op] = list(ops or [])

    def add(self, op: Op) -> Op:
        self.ops.append(op)
        return op

    def train(self, mode: bool = True) -> None:
        for op in self.ops:
            op.training = mode

    def forward(self, x: Tensor) -> Tensor:
        for op in self.ops:
            x = op.forward(x)
        return x

    def backward(self, upstream: Tensor) -> Tensor:
        grad = upstream
        for op in reversed(self.ops):
            grad = op.backward(grad)
        return grad


# ---------------------------------------------------------------------------
# 有限差分校验
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray,
                       eps: float = 1e-5) -> np.ndarray:
    """
    中心差分数值梯度

    Args:
        fn: 标量函数, 接受与x同形状的数组
        x: 求导位置(不会被修改)
        eps: 差分步长

    Returns:
        与x同形状的float64数值梯度
    """
    point = np.array(x, dtype=np.float64)
    grad = np.zeros_like(point)
    flat, flat_grad = point.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = fn(point)
        flat[i] = original - eps
        minus = fn(point)
        flat[i] = original
        flat_grad[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """最大绝对误差除以数值梯度的最大幅值"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"梯度形状不一致: {analytic.shape} != {numeric.shape}")
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale
