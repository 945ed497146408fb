"""
类型定义模块，包含项目中使用的各种数据结构类型定义
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from typing_extensions import TypedDict

# 张量类型: 行优先的numpy数组, 默认float32, 校验时可切换为float64
Tensor = np.ndarray


class ConfigError(ValueError):
    """配置相关异常类"""
    pass


class Mode(Enum):
    """运行模式枚举"""
    PACNET = "pacnet"   # 空间网络 + 时间网络
    SCNN3 = "scnn3"     # 多帧邻域搜索, 不使用时间网络
    SCNN0 = "scnn0"     # 单帧邻域搜索(Ts=0), 不使用时间网络


@dataclass
class FrameSequence:
    """视频帧序列, frames形状为(T, C, H, W), 取值范围[0, 1]"""
    frames: Tensor
    frame_rate: float = 25.0

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"帧序列必须是四维(T, C, H, W), 实际维度: {self.frames.ndim}")
        if self.frames.shape[0] == 0:
            raise ValueError("帧序列不能为空")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, index: int) -> Tensor:
        return self.frames[index]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass(frozen=True)
class NoiseSpec:
    """噪声参数, sigma以0-255为刻度"""
    sigma: float = 25.0
    clipped: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"噪声标准差不能为负: {self.sigma}")


@dataclass(frozen=True)
class PatchSpec:
    """块参数: sqrtF为搜索块边长, sqrtf为拼接块边长(位于搜索块中央)"""
    sqrtF: int = 15
    sqrtf: int = 7

    def __post_init__(self):
        if self.sqrtf < 1 or self.sqrtF < 1:
            raise ConfigError(f"块边长必须为正: sqrtF={self.sqrtF}, sqrtf={self.sqrtf}")
        if self.sqrtF % 2 == 0 or self.sqrtf % 2 == 0:
            raise ConfigError(f"块边长必须为奇数: sqrtF={self.sqrtF}, sqrtf={self.sqrtf}")
        if self.sqrtf > self.sqrtF:
            raise ConfigError(f"拼接块不能大于搜索块: sqrtf={self.sqrtf} > sqrtF={self.sqrtF}")

    @property
    def f(self) -> int:
        return self.sqrtf * self.sqrtf

    @property
    def search_radius(self) -> int:
        return (self.sqrtF - 1) // 2

    @property
    def offsets(self) -> List[Tuple[int, int]]:
        """按行优先顺序枚举全部 sqrtf x sqrtf 个偏移"""
        return [(v, h) for v in range(self.sqrtf) for h in range(self.sqrtf)]


@dataclass(frozen=True)
class SearchWindow:
    """时空搜索窗口: B为空间边长, Ts为时间半径"""
    B: int = 89
    Ts: int = 3

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError(f"搜索窗口边长必须为正: B={self.B}")
        if self.B % 2 == 0:
            raise ConfigError(f"搜索窗口边长必须为奇数: B={self.B}")
        if self.Ts < 0:
            raise ConfigError(f"时间半径不能为负: Ts={self.Ts}")

    @property
    def half(self) -> int:
        return self.B // 2


@dataclass
class NeighborList:
    """
    逐像素的n个最近邻
    t, y, x, dist 的形状均为 (H, W, n), 沿最后一维按距离非降序排列
    """
    t0: int
    t: np.ndarray
    y: np.ndarray
    x: np.ndarray
    dist: np.ndarray

    @property
    def n(self) -> int:
        return self.dist.shape[-1]

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return self.dist.shape[0], self.dist.shape[1]


@dataclass
class PatchCraftGroup:
    """一个偏移对应的帧组, frames形状为(n+1, C, H, W), 第0帧为当前帧副本"""
    offset: Tuple[int, int]
    frames: Tensor


@dataclass(frozen=True)
class SepConvConfig:
    """可分离卷积层配置"""
    n_in: int
    n_out: int
    f_in: int
    f_out: int
    c: int
    m: int

    def __post_init__(self):
        for name in ("n_in", "n_out", "f_in", "f_out", "c", "m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"SepConv配置 {name} 必须为正: {getattr(self, name)}")
        if self.m % 2 == 0:
            raise ConfigError(f"SepConv空间卷积核边长必须为奇数: m={self.m}")


@dataclass(frozen=True)
class ScnnConfig:
    """空间去噪网络配置, n_in = n+1, f_in = f+1"""
    n_in: int = 15
    f_in: int = 50
    c: int = 3
    m: int = 7
    blocks: int = 5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.blocks < 2:
            raise ConfigError(f"S-CNN至少需要2个块: blocks={self.blocks}")
        n = self.n_in
        for _ in range(self.blocks):
            n = math.ceil(n / 2)
        if n != 1:
            raise ConfigError(f"近邻数 {self.n_in} 经过 {self.blocks} 次减半后未收敛到1")

    def layer_configs(self) -> List[SepConvConfig]:
        """按块顺序生成每个SepConv层的配置"""
        configs = []
        n_in = self.n_in
        for block in range(self.blocks):
            n_out = math.ceil(n_in / 2)
            f_out = 1 if block == self.blocks - 1 else self.f_in
            configs.append(SepConvConfig(n_in, n_out, self.f_in, f_out, self.c, self.m))
            n_in = n_out
        return configs


@dataclass(frozen=True)
class TcnnConfig:
    """时间去噪网络配置, 输入通道为 2C (y 与 ŷ 沿颜色维拼接)"""
    c: int = 3
    Tt: int = 3
    conv3d_channels: int = 48
    conv2d_layers: int = 17
    conv2d_channels: int = 96
    kernel: int = 3
    lrelu_slope: float = 0.1

    def __post_init__(self):
        if self.Tt < 1:
            raise ConfigError(f"Tt必须为正: {self.Tt}")
        if self.conv2d_layers < 2:
            raise ConfigError(f"Tf2D至少需要2层: {self.conv2d_layers}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"卷积核边长必须为奇数: {self.kernel}")
        if not 0 < self.lrelu_slope < 1:
            raise ConfigError(f"LReLU斜率必须在(0,1)之间: {self.lrelu_slope}")

    @property
    def window(self) -> int:
        return 2 * self.Tt + 1


@dataclass(frozen=True)
class OptimizerSpec:
    """Lamb优化器参数, decay为每个epoch的学习率乘子"""
    learning_rate: float = 5e-3
    decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay: float = 0.0
    layerwise_trust_ratio: bool = True

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"beta必须在(0,1)之间: beta1={self.beta1}, beta2={self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon必须为正: {self.epsilon}")
        if self.learning_rate < 0:
            raise ConfigError(f"学习率不能为负: {self.learning_rate}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"学习率衰减因子必须在(0,1]之间: {self.decay}")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate * (self.decay ** epoch)


@dataclass(frozen=True)
class TrainingSpec:
    """训练几何与迭代参数"""
    steps: int = 2000
    batch: int = 4
    steps_per_epoch: int = 50
    crop: int = 24
    clips: int = 8
    log_every: int = 50

    def __post_init__(self):
        for name in ("steps", "batch", "steps_per_epoch", "crop", "clips", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"训练参数 {name} 必须为正: {getattr(self, name)}")


@dataclass
class LossRecord:
    """训练损失记录"""
    step: int
    mse: float
    psnr: float


@dataclass
class RunReport:
    """一次去噪运行的报告"""
    frame_psnr: List[float] = field(default_factory=list)
    noisy_psnr: List[float] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)

    @property
    def average_psnr(self) -> Optional[float]:
        if not self.frame_psnr:
            return None
        return float(np.mean(self.frame_psnr))

    @property
    def average_noisy_psnr(self) -> Optional[float]:
        if not self.noisy_psnr:
            return None
        return float(np.mean(self.noisy_psnr))


class LayerCount(TypedDict):
    """参数量报告中的一层"""
    module: str
    layer: str
    closed_form: int
    enumerated: int


class ModuleCount(TypedDict):
    """参数量报告中的模块汇总"""
    module: str
    closed_form: int
    enumerated: int
    reference: float
    deviation: float
    within: bool
