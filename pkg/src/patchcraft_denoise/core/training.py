"""
训练循环模块: 随机裁剪取样、小批量组装以及两个网络共用的迭代过程
"""

import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Protocol

from .optimizer import optimizer_step
from .tensorcore import NumericError, ParamBank, mse_loss
from ..utils.data_types import LossRecord, OptimizerSpec, Tensor, TrainingSpec
from ..utils.logger import get_logger

logger = get_logger("training")

# 取样函数: 给定随机数发生器, 返回 (网络输入批次, 目标批次)
Sampler = Callable[[np.random.Generator], Tuple[Tensor, Tensor]]
# epoch回调: (epoch序号, 已完成步数, 截至目前的损失记录)
EpochCallback = Callable[[int, int, List[LossRecord]], None]


class Trainable(Protocol):
    """可被训练循环驱动的模型"""
    bank: ParamBank

    def train(self, mode: bool = True) -> None:
        ...

    def estimate(self, x: Tensor) -> Tensor:
        ...

    def backward(self, grad: Tensor) -> None:
        ...


def crop_origin(rng: np.random.Generator, height: int, width: int, crop: int) -> Tuple[int, int]:
    """随机裁剪窗口左上角; 帧小于裁剪尺寸时使用整帧"""
    top = int(rng.integers(0, height - crop + 1)) if height > crop else 0
    left = int(rng.integers(0, width - crop + 1)) if width > crop else 0
    return top, left


def crop_pair(source: Tensor, target: Tensor, top: int, left: int, crop: int) -> Tuple[Tensor, Tensor]:
    """在最后两个空间维上对输入与目标做相同的裁剪"""
    window = (Ellipsis, slice(top, top + crop), slice(left, left + crop))
    return source[window], target[window]


def sample_batch(rng: np.random.Generator, items: Sequence[Tuple[Tensor, Tensor]],
                 batch: int, crop: int) -> Tuple[Tensor, Tensor]:
    """
    组装一个小批量

    Args:
        rng: 随机数发生器, 决定样本与裁剪位置
        items: (输入, 目标) 对, 两者最后两维为相同的空间尺寸
        batch: 批大小
        crop: 裁剪边长

    Returns:
        (输入批次, 目标批次), 新增第0维为批次
    """
    if not items:
        raise ValueError("训练样本为空")
    sources, targets = [], []
    for _ in range(batch):
        source, target = items[int(rng.integers(0, len(items)))]
        height, width = target.shape[-2:]
        top, left = crop_origin(rng, height, width, crop)
        cropped = crop_pair(source, target, top, left, crop)
        sources.append(cropped[0])
        targets.append(cropped[1])
    return np.stack(sources), np.stack(targets)


def loss_psnr(mse: float) -> float:
    """峰值为1时MSE对应的PSNR"""
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def run_training(model: Trainable, sampler: Sampler, optimizer: OptimizerSpec,
                 training: TrainingSpec, seed: int, label: str,
                 on_epoch: Optional[EpochCallback] = None) -> List[LossRecord]:
    """
    执行训练迭代: 取样 → 前向 → MSE → 反向 → 参数更新

    Args:
        model: 待训练模型
        sampler: 取样函数
        optimizer: 优化器参数
        training: 迭代参数
        seed: 取样随机种子, 相同种子得到相同的训练过程
        label: 日志中的网络名称
        on_epoch: 每个epoch结束时的回调(保存检查点等)

    Returns:
        每步的损失记录
    """
    rng = np.random.default_rng(seed)
    model.train(True)
    records: List[LossRecord] = []
    for step in range(1, training.steps + 1):
        epoch = (step - 1) // training.steps_per_epoch
        inputs, targets = sampler(rng)
        model.bank.zero_grad()
        estimate = model.estimate(inputs)
        loss, grad = mse_loss(estimate, targets)
        if not math.isfinite(loss):
            logger.error(f"{label} 第 {step} 步损失非有限: {loss}, 学习率 {optimizer.rate_at(epoch)}")
            raise NumericError(f"{label} 第 {step} 步损失非有限: {loss}")
        model.backward(grad)
        optimizer_step(model.bank, optimizer, step, epoch)
        records.append(LossRecord(step=step, mse=loss, psnr=loss_psnr(loss)))

        if step % training.log_every == 0 or step == 1:
            logger.info(f"{label} 第 {step}/{training.steps} 步, mse={loss:.6g}, psnr={loss_psnr(loss):.2f}dB")
        if on_epoch is not None and (step % training.steps_per_epoch == 0 or step == training.steps):
            on_epoch(epoch, step, records)
    model.train(False)
    return records
