"""
优化器模块, 实现带逐层信任比(Lamb)的自适应矩估计更新
"""

import numpy as np

from .tensorcore import NumericError, ParamBank
from ..utils.data_types import OptimizerSpec
from ..utils.logger import get_logger

logger = get_logger("optimizer")


def optimizer_step(bank: ParamBank, spec: OptimizerSpec, step: int, epoch: int = 0) -> ParamBank:
    """
    执行一步参数更新

    Args:
        bank: 参数库, 梯度必须已经填充
        spec: 优化器参数
        step: 从1开始的步数, 用于矩估计的偏差修正
        epoch: 当前epoch, 决定衰减后的学习率

    Returns:
        更新后的参数库(原地更新)
    """
    if step < 1:
        raise ValueError(f"步数必须从1开始: {step}")

    # 先整体检查, 任何非有限梯度都拒绝本步更新
    bad = [name for name in bank.names() if not np.all(np.isfinite(bank.grad(name)))]
    if bad:
        logger.error(f"第 {step} 步梯度含非有限值, 拒绝更新, 涉及参数: {bad}")
        raise NumericError(f"梯度含非有限值: {bad}")

    lr = spec.rate_at(epoch)
    bias1 = 1.0 - spec.beta1 ** step
    bias2 = 1.0 - spec.beta2 ** step

    for name in bank.names():
        value = bank.value(name).astype(np.float64)
        grad = bank.grad(name).astype(np.float64)
        m, v = bank.moments(name)
        m = spec.beta1 * m.astype(np.float64) + (1 - spec.beta1) * grad
        v = spec.beta2 * v.astype(np.float64) + (1 - spec.beta2) * grad * grad

        update = (m / bias1) / (np.sqrt(v / bias2) + spec.epsilon)
        if spec.weight_decay:
            update = update + spec.weight_decay * value

        ratio = 1.0
        if spec.layerwise_trust_ratio:
            w_norm = float(np.linalg.norm(value))
            u_norm = float(np.linalg.norm(update))
            if w_norm > 0 and u_norm > 0:
                ratio = w_norm / u_norm

        dtype = bank.value(name).dtype
        bank.set_value(name, (value - lr * ratio * update).astype(dtype))
        bank.set_moments(name, m.astype(dtype), v.astype(dtype))

    return bank
