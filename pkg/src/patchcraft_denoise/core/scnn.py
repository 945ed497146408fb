"""
空间去噪网络(S-CNN): 5个SepConv块逐块将近邻维减半, 在残差域预测噪声 z_s
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .sepconv import SepConv, sepconv_param_count
from .tensorcore import BatchNorm, OpGraph, ParamBank, ReLU, ShapeError
from .training import EpochCallback, run_training, sample_batch
from ..utils.data_types import LossRecord, OptimizerSpec, ScnnConfig, Tensor, TrainingSpec
from ..utils.logger import get_logger

logger = get_logger("scnn")

# BN的通道类轴: (B, n, f, c, v, h) 中的 n, f, c
_BN_AXES = (1, 2, 3)


def scnn_layer_counts(config: ScnnConfig) -> List[Dict[str, int]]:
    """逐块参数量: SepConv闭式计数与BN仿射参数"""
    counts = []
    blocks = config.layer_configs()
    for index, layer in enumerate(blocks):
        with_bn = 0 < index < len(blocks) - 1
        bn = 2 * layer.n_out * layer.f_out * layer.c if with_bn else 0
        counts.append({"sepconv": sepconv_param_count(layer), "bn": bn})
    return counts


def scnn_param_count(config: ScnnConfig, include_bn: bool = True) -> int:
    """S-CNN总参数量"""
    counts = scnn_layer_counts(config)
    return sum(c["sepconv"] + (c["bn"] if include_bn else 0) for c in counts)


class ScnnModel:
    """
    S-CNN 模型

    块结构: 第一块 SepConv+ReLU, 中间块 SepConv+BN+ReLU, 最后一块仅 SepConv(f_out=1)
    """

    def __init__(self, config: ScnnConfig, seed: int = 0, zero_last: bool = True):
        """
        Args:
            config: 网络配置
            seed: 参数初始化种子
            zero_last: 最后一层的近邻混合核置零, 使初始网络输出 ŷ = y
        """
        self.config = config
        self.bank = ParamBank()
        self.graph = OpGraph()
        self.trace: List[Tuple[int, ...]] = []
        rng = np.random.default_rng(seed)

        layers = config.layer_configs()
        for index, layer in enumerate(layers):
            last = index == len(layers) - 1
            self.graph.add(SepConv(self.bank, f"block{index}.sepconv", layer, rng, zero=last and zero_last))
            if 0 < index < len(layers) - 1:
                bn_name = f"block{index}.bn"
                shape = (layer.n_out, layer.f_out, layer.c)
                self.bank.add(f"{bn_name}.gamma", np.ones(shape))
                self.bank.add(f"{bn_name}.beta", np.zeros(shape))
                self.bank.add_buffer(f"{bn_name}.running_mean", np.zeros(shape))
                self.bank.add_buffer(f"{bn_name}.running_var", np.ones(shape))
                self.graph.add(BatchNorm(self.bank, bn_name, _BN_AXES, config.bn_momentum, config.bn_eps))
            if not last:
                self.graph.add(ReLU(f"block{index}.relu"))

    def train(self, mode: bool = True) -> None:
        self.graph.train(mode)

    def _check_input(self, aug: Tensor) -> None:
        cfg = self.config
        if aug.ndim != 6 or aug.shape[1:4] != (cfg.n_in, cfg.f_in, cfg.c):
            raise ShapeError(
                f"S-CNN输入形状 {aug.shape} 与配置 (B, {cfg.n_in}, {cfg.f_in}, {cfg.c}, v, h) 不一致")

    def forward(self, aug: Tensor) -> Tuple[Tensor, Tensor]:
        """
        前向传播

        Args:
            aug: 增广输入 (B, n+1, f+1, c, v, h)

        Returns:
            (ŷ, z_s), 形状均为 (B, c, v, h)
        """
        self._check_input(aug)
        self.trace = [aug.shape[1:]]
        x = aug
        for op in self.graph.ops:
            x = op.forward(x)
            if isinstance(op, SepConv):
                self.trace.append(x.shape[1:])
        z_s = x[:, 0, 0]
        # 近邻0、分组0即当前帧副本
        y = aug[:, 0, 0]
        return (y - z_s).astype(aug.dtype), z_s

    def estimate(self, aug: Tensor) -> Tensor:
        return self.forward(aug)[0]

    def backward(self, grad_yhat: Tensor) -> None:
        """由 dL/dŷ 反向传播, 参数梯度累加到参数库"""
        upstream = -grad_yhat[:, None, None]
        self.graph.backward(upstream)


def scnn_forward(aug: Tensor, model: ScnnModel) -> Tuple[Tensor, Tensor]:
    """
    推理模式下对单帧去噪

    Args:
        aug: (n+1, f+1, c, H, W) 增广输入
        model: S-CNN模型

    Returns:
        (ŷ, z_s), 形状均为 (c, H, W)
    """
    if aug.ndim != 5:
        raise ShapeError(f"S-CNN单帧输入必须为五维 (n+1, f+1, c, H, W), 实际 {aug.shape}")
    model.train(False)
    yhat, z_s = model.forward(aug[None])
    return yhat[0], z_s[0]


def train_spatial(samples: Sequence[Tuple[Tensor, Tensor]], config: ScnnConfig,
                  optimizer: OptimizerSpec, training: TrainingSpec, seed: int = 0,
                  model: Optional[ScnnModel] = None,
                  on_epoch: Optional[EpochCallback] = None) -> Tuple[ScnnModel, List[LossRecord]]:
    """
    训练S-CNN

    Args:
        samples: (增广输入 (n+1, f+1, c, H, W), 干净帧 (c, H, W)) 对
        config: 网络配置
        optimizer: 优化器参数
        training: 迭代参数, 每个样本随机裁剪 crop x crop 区域
        seed: 初始化与取样种子
        model: 继续训练的已有模型, 为空时新建
        on_epoch: epoch回调

    Returns:
        (训练后的模型, 损失记录)
    """
    model = model or ScnnModel(config, seed=seed)
    logger.info(f"开始训练S-CNN: {len(samples)} 个样本, 参数量 {model.bank.total_parameter_count()}")

    def sampler(rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        return sample_batch(rng, samples, training.batch, training.crop)

    records = run_training(model, sampler, optimizer, training, seed, "S-CNN", on_epoch)
    return model, records
