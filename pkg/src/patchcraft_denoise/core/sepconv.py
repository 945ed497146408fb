"""
可分离卷积层(SepConv): 五维张量 (n, f, c, v, h) 上依次执行 空间卷积 → 块维混合 → 近邻维混合

张量带批次维时形状为 (B, n, f, c, v, h); 三个子卷积都是分组卷积,
分组维作为前导维交给 tensorcore.conv2d 广播处理。
"""

from typing import Optional

import numpy as np

from .tensorcore import (GraphError, Op, ParamBank, ShapeError, conv2d, conv2d_backward,
                         kaiming_normal)
from ..utils.data_types import SepConvConfig, Tensor
from ..utils.logger import get_logger

logger = get_logger("sepconv")


def sepconv_param_count(config: SepConvConfig) -> int:
    """按闭式公式计算一层的参数量(含偏置)"""
    n_in, n_out, f_in, f_out, c, m = (config.n_in, config.n_out, config.f_in,
                                      config.f_out, config.c, config.m)
    vh = n_in * f_in * (c * c * m * m + c)
    fb = n_in * (c * c * f_in * f_out + c * f_out)
    nb = f_out * c * (n_in * n_out + n_out)
    return vh + fb + nb


def register_params(bank: ParamBank, name: str, config: SepConvConfig,
                    rng: np.random.Generator, zero: bool = False) -> None:
    """
    在参数库中注册一层的三组参数

    Args:
        bank: 参数库
        name: 层名, 参数名形如 <name>.vh.weight
        config: 层配置
        rng: 初始化随机数发生器
        zero: 近邻混合核置零, 使该层输出恒为偏置(偏置初始为0)
    """
    n_in, n_out, f_in, f_out, c, m = (config.n_in, config.n_out, config.f_in,
                                      config.f_out, config.c, config.m)
    bank.add(f"{name}.vh.weight", kaiming_normal(rng, (n_in, f_in, c, c, m, m), c * m * m))
    bank.add(f"{name}.vh.bias", np.zeros((n_in, f_in, c)))
    bank.add(f"{name}.f.weight", kaiming_normal(rng, (n_in, f_out * c, f_in * c, 1, 1), f_in * c))
    bank.add(f"{name}.f.bias", np.zeros((n_in, f_out * c)))
    n_shape = (f_out, c, n_out, n_in, 1, 1)
    bank.add(f"{name}.n.weight", np.zeros(n_shape) if zero else kaiming_normal(rng, n_shape, n_in))
    bank.add(f"{name}.n.bias", np.zeros((f_out, c, n_out)))


class _GroupConv(Op):
    """三个子卷积的公共部分: 取参数、保存输入、累加参数梯度"""

    def __init__(self, bank: ParamBank, name: str, pad: int = 0):
        super().__init__(name)
        self.bank = bank
        self.pad = pad

    def _params(self):
        return self.bank.value(f"{self.name}.weight"), self.bank.value(f"{self.name}.bias")

    def _conv(self, x: Tensor) -> Tensor:
        w, b = self._params()
        self._ctx = {"x": x}
        return conv2d(x, w, b, self.pad)

    def _conv_backward(self, grad: Tensor) -> Tensor:
        ctx = self._pop_ctx()
        w, b = self._params()
        grad_x, grad_w, grad_b = conv2d_backward(ctx["x"], w, b, self.pad, grad)
        self.bank.accumulate(f"{self.name}.weight", grad_w)
        self.bank.accumulate(f"{self.name}.bias", grad_b)
        return grad_x


class ConvVH(_GroupConv):
    """空间卷积: 每个 (n, f) 分组一个 c→c 的 m×m 卷积, 零填充(m-1)/2"""

    def forward(self, x: Tensor) -> Tensor:
        return self._conv(x)

    def backward(self, grad: Tensor) -> Tensor:
        return self._conv_backward(grad)


class ConvF(_GroupConv):
    """块维混合: 每个近邻分组一个 c·f_in → c·f_out 的1×1卷积, 通道按f优先展开"""

    def forward(self, x: Tensor) -> Tensor:
        batch, n, f, c, v, h = x.shape
        out = self._conv(x.reshape(batch, n, f * c, v, h))
        return out.reshape(batch, n, -1, c, v, h)

    def backward(self, grad: Tensor) -> Tensor:
        batch, n, f, c, v, h = grad.shape
        grad_x = self._conv_backward(grad.reshape(batch, n, f * c, v, h))
        return grad_x.reshape(batch, n, -1, c, v, h)


class ConvN(_GroupConv):
    """近邻维混合: 每个 (f, c) 分组一个 n_in → n_out 的1×1卷积"""

    def forward(self, x: Tensor) -> Tensor:
        out = self._conv(np.ascontiguousarray(x.transpose(0, 2, 3, 1, 4, 5)))
        return out.transpose(0, 3, 1, 2, 4, 5)

    def backward(self, grad: Tensor) -> Tensor:
        grad_x = self._conv_backward(np.ascontiguousarray(grad.transpose(0, 2, 3, 1, 4, 5)))
        return grad_x.transpose(0, 3, 1, 2, 4, 5)


class SepConv(Op):
    """
    可分离卷积层

    输入 (B, n_in, f_in, c, v, h), 输出 (B, n_out, f_out, c, v, h); 参数保存在共享参数库中
    """

    def __init__(self, bank: ParamBank, name: str, config: SepConvConfig,
                 rng: Optional[np.random.Generator] = None, zero: bool = False):
        super().__init__(name)
        self.bank = bank
        self.config = config
        if f"{name}.vh.weight" not in bank.names():
            register_params(bank, name, config, rng or np.random.default_rng(0), zero)
        self.stages = [
            ConvVH(bank, f"{name}.vh", pad=(config.m - 1) // 2),
            ConvF(bank, f"{name}.f"),
            ConvN(bank, f"{name}.n"),
        ]
        self._forwarded = False

    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 6 or x.shape[1:4] != (cfg.n_in, cfg.f_in, cfg.c):
            raise ShapeError(
                f"{self.name}: 输入形状 {x.shape} 与配置 (B, {cfg.n_in}, {cfg.f_in}, {cfg.c}, v, h) 不一致")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        for stage in self.stages:
            x = stage.forward(x)
        self._forwarded = True
        return x

    def backward(self, grad: Tensor) -> Tensor:
        if not self._forwarded:
            raise GraphError(f"{self.name}: 在前向传播之前调用了反向传播")
        self._forwarded = False
        for stage in reversed(self.stages):
            grad = stage.backward(grad)
        return grad

    def parameter_count(self) -> int:
        """参数库中属于本层的参数个数"""
        prefix = f"{self.name}."
        return sum(self.bank.value(k).size for k in self.bank.names() if k.startswith(prefix))


def _batched(x: Tensor) -> Tensor:
    if x.ndim == 5:
        return x[None]
    if x.ndim != 6:
        raise ShapeError(f"SepConv输入必须为五维 (n, f, c, v, h) 或带批次的六维, 实际 {x.shape}")
    return x


def sepconv_forward(x: Tensor, bank: ParamBank, name: str, config: SepConvConfig) -> Tensor:
    """
    单层前向

    Args:
        x: (n_in, f_in, c, v, h) 或 (B, n_in, f_in, c, v, h)
        bank: 已注册该层参数的参数库
        name: 层名
        config: 层配置

    Returns:
        与输入同样带(或不带)批次维的 (n_out, f_out, c, v, h)
    """
    layer = SepConv(bank, name, config)
    out = layer.forward(_batched(x))
    return out[0] if x.ndim == 5 else out


def sepconv_backward(x: Tensor, bank: ParamBank, name: str, config: SepConvConfig,
                     upstream: Tensor) -> Tensor:
    """单层反向: 参数梯度累加到参数库, 返回输入梯度"""
    layer = SepConv(bank, name, config)
    layer.forward(_batched(x))
    grad = layer.backward(_batched(upstream))
    return grad[0] if x.ndim == 5 else grad
