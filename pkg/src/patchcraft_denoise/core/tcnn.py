"""
时间去噪网络(T-CNN): 在 2Tt+1 帧滑动窗口上先做无时间填充的三维卷积(Tf3D), 再做二维卷积(Tf2D)

输入为含噪帧 y 与S-CNN输出 ŷ 沿颜色维拼接的 (B, 2C, 2Tt+1, H, W), 网络预测噪声 z_t, x̂ = ŷ_center - z_t
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensorcore import (Conv2d, Conv3d, LeakyReLU, Op, OpGraph, ParamBank, ShapeError,
                         kaiming_normal)
from .training import EpochCallback, crop_origin, loss_psnr, run_training
from ..utils.data_types import LossRecord, OptimizerSpec, TcnnConfig, Tensor, TrainingSpec
from ..utils.logger import get_logger

logger = get_logger("tcnn")


def temporal_window_indices(length: int, t: int, Tt: int) -> List[int]:
    """帧t的时间窗口帧序号, 越过序列边界时重复边缘帧"""
    if not 0 <= t < length:
        raise IndexError(f"帧序号越界: t={t}, 序列长度 {length}")
    return [min(max(t + k, 0), length - 1) for k in range(-Tt, Tt + 1)]


def build_window(noisy: Tensor, spatial: Tensor, t: int, Tt: int) -> Tensor:
    """
    组装帧t的网络输入

    Args:
        noisy: 含噪序列 (T, C, H, W)
        spatial: S-CNN输出序列 (T, C, H, W)
        t: 中心帧序号
        Tt: 时间半径

    Returns:
        (2C, 2Tt+1, H, W), 前C个通道为 y, 后C个通道为 ŷ
    """
    if noisy.shape != spatial.shape:
        raise ShapeError(f"含噪序列 {noisy.shape} 与S-CNN输出 {spatial.shape} 形状不一致")
    indices = temporal_window_indices(noisy.shape[0], t, Tt)
    stacked = np.concatenate([noisy[indices], spatial[indices]], axis=1)
    return np.ascontiguousarray(stacked.transpose(1, 0, 2, 3))


def _conv_layout(config: TcnnConfig) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
    """Tf3D与Tf2D各层的 (输入通道, 输出通道)"""
    tf3d = []
    channels = 2 * config.c
    for _ in range(config.Tt):
        tf3d.append((channels, config.conv3d_channels))
        channels = config.conv3d_channels
    tf2d = [(channels, config.conv2d_channels)]
    tf2d += [(config.conv2d_channels, config.conv2d_channels)] * (config.conv2d_layers - 2)
    tf2d.append((config.conv2d_channels, config.c))
    return tf3d, tf2d


def tcnn_layer_counts(config: TcnnConfig) -> List[Dict[str, int]]:
    """逐层 (权重数, 偏置数)"""
    k = config.kernel
    tf3d, tf2d = _conv_layout(config)
    counts = [{"weight": cin * cout * k ** 3, "bias": cout} for cin, cout in tf3d]
    counts += [{"weight": cin * cout * k ** 2, "bias": cout} for cin, cout in tf2d]
    return counts


def tcnn_param_count(config: TcnnConfig, include_bias: bool = True) -> int:
    """T-CNN总参数量"""
    return sum(c["weight"] + (c["bias"] if include_bias else 0) for c in tcnn_layer_counts(config))


class SqueezeTime(Op):
    """去掉长度为1的时间维: (B, C, 1, H, W) → (B, C, H, W)"""

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != 1:
            raise ShapeError(f"Tf3D输出时间维应为1, 实际 {x.shape[-3]}")
        return x[..., 0, :, :]

    def backward(self, grad: Tensor) -> Tensor:
        return grad[..., None, :, :]


class TcnnModel:
    """T-CNN 模型"""

    def __init__(self, config: TcnnConfig, seed: int = 0, zero_last: bool = True):
        """
        Args:
            config: 网络配置
            seed: 参数初始化种子
            zero_last: 最后一层卷积核置零, 使初始网络输出 x̂ = ŷ_center
        """
        self.config = config
        self.bank = ParamBank()
        self.graph = OpGraph()
        self.trace: List[int] = []
        rng = np.random.default_rng(seed)
        k = config.kernel
        tf3d, tf2d = _conv_layout(config)

        for index, (cin, cout) in enumerate(tf3d):
            name = f"tf3d.{index}"
            self.bank.add(f"{name}.weight", kaiming_normal(rng, (cout, cin, k, k, k), cin * k ** 3))
            self.bank.add(f"{name}.bias", np.zeros(cout))
            self.graph.add(Conv3d(self.bank, name))
            self.graph.add(LeakyReLU(f"{name}.lrelu", config.lrelu_slope))
        self.graph.add(SqueezeTime("squeeze"))

        for index, (cin, cout) in enumerate(tf2d):
            name = f"tf2d.{index}"
            last = index == len(tf2d) - 1
            shape = (cout, cin, k, k)
            weight = np.zeros(shape) if last and zero_last else kaiming_normal(rng, shape, cin * k * k)
            self.bank.add(f"{name}.weight", weight)
            self.bank.add(f"{name}.bias", np.zeros(cout))
            self.graph.add(Conv2d(self.bank, name, pad=(k - 1) // 2))
            if not last:
                self.graph.add(LeakyReLU(f"{name}.lrelu", config.lrelu_slope))

    def train(self, mode: bool = True) -> None:
        self.graph.train(mode)

    def forward(self, window: Tensor) -> Tuple[Tensor, Tensor]:
        """
        前向传播

        Args:
            window: (B, 2C, 2Tt+1, H, W)

        Returns:
            (x̂, z_t), 形状均为 (B, C, H, W)
        """
        cfg = self.config
        if window.ndim != 5 or window.shape[1:3] != (2 * cfg.c, cfg.window):
            raise ShapeError(
                f"T-CNN输入形状 {window.shape} 与配置 (B, {2 * cfg.c}, {cfg.window}, H, W) 不一致")
        self.trace = [window.shape[2]]
        x = window
        for op in self.graph.ops:
            x = op.forward(x)
            if isinstance(op, Conv3d):
                self.trace.append(x.shape[2])
        z_t = x
        center = window[:, cfg.c:, cfg.Tt]
        return (center - z_t).astype(window.dtype), z_t

    def estimate(self, window: Tensor) -> Tensor:
        return self.forward(window)[0]

    def backward(self, grad_xhat: Tensor) -> None:
        self.graph.backward(-grad_xhat)


def tcnn_forward(y_window: Tensor, yhat_window: Tensor, model: TcnnModel) -> Tuple[Tensor, Tensor]:
    """
    推理模式下生成中心帧

    Args:
        y_window: 2Tt+1 个含噪帧 (2Tt+1, C, H, W)
        yhat_window: 对应的S-CNN输出 (2Tt+1, C, H, W)
        model: T-CNN模型

    Returns:
        (x̂, z_t), 形状均为 (C, H, W)
    """
    if y_window.shape != yhat_window.shape or y_window.ndim != 4:
        raise ShapeError(f"窗口形状不一致: y {y_window.shape}, ŷ {yhat_window.shape}")
    window = np.concatenate([y_window, yhat_window], axis=1).transpose(1, 0, 2, 3)
    model.train(False)
    xhat, z_t = model.forward(np.ascontiguousarray(window)[None])
    return xhat[0], z_t[0]


def sequence_forward(noisy: Tensor, spatial: Tensor, model: TcnnModel) -> Tensor:
    """对整段序列逐帧滑窗推理, 返回 (T, C, H, W)"""
    frames = []
    for t in range(noisy.shape[0]):
        indices = temporal_window_indices(noisy.shape[0], t, model.config.Tt)
        frames.append(tcnn_forward(noisy[indices], spatial[indices], model)[0])
    return np.stack(frames)


def validation_psnr(clips: Sequence[Tuple[Tensor, Tensor, Tensor]], model: TcnnModel) -> float:
    """验证序列上 x̂ 的逐帧PSNR平均值, 整帧推理"""
    values = []
    for noisy, spatial, clean in clips:
        xhat = sequence_forward(noisy, spatial, model)
        diff = xhat.astype(np.float64) - clean.astype(np.float64)
        mse = np.mean(diff * diff, axis=(1, 2, 3))
        values.extend(loss_psnr(float(m)) for m in mse)
    return float(np.mean(values))


def train_temporal(clips: Sequence[Tuple[Tensor, Tensor, Tensor]], config: TcnnConfig,
                   optimizer: OptimizerSpec, training: TrainingSpec, seed: int = 0,
                   model: Optional[TcnnModel] = None,
                   on_epoch: Optional[EpochCallback] = None,
                   validation: Optional[Sequence[Tuple[Tensor, Tensor, Tensor]]] = None
                   ) -> Tuple[TcnnModel, List[LossRecord]]:
    """
    在冻结的S-CNN输出上训练T-CNN

    给出验证序列时, 每个epoch结束后在验证序列上评估, 训练结束时模型恢复为验证PSNR最高的参数;
    训练前的参数也参与比较, 零初始化的模型因此不会比S-CNN输出更差

    Args:
        clips: (含噪序列, S-CNN输出序列, 干净序列) 三元组, 形状均为 (T, C, H, W)
        config: 网络配置
        optimizer: 优化器参数
        training: 迭代参数
        seed: 初始化与取样种子
        model: 继续训练的已有模型
        on_epoch: epoch回调
        validation: 验证用三元组, 与训练三元组格式相同

    Returns:
        (训练后的模型, 损失记录)
    """
    if not clips:
        raise ValueError("训练序列为空")
    model = model or TcnnModel(config, seed=seed)
    logger.info(f"开始训练T-CNN: {len(clips)} 个序列, 参数量 {model.bank.total_parameter_count()}")
    crop = training.crop

    def sampler(rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        windows, targets = [], []
        for _ in range(training.batch):
            noisy, spatial, clean = clips[int(rng.integers(0, len(clips)))]
            t = int(rng.integers(0, noisy.shape[0]))
            top, left = crop_origin(rng, noisy.shape[2], noisy.shape[3], crop)
            rows, cols = slice(top, top + crop), slice(left, left + crop)
            windows.append(build_window(noisy[..., rows, cols], spatial[..., rows, cols], t, config.Tt))
            targets.append(clean[t][..., rows, cols])
        return np.stack(windows), np.stack(targets)

    if not validation:
        records = run_training(model, sampler, optimizer, training, seed, "T-CNN", on_epoch)
        return model, records

    best = {"psnr": validation_psnr(validation, model), "step": 0,
            "state": {k: v.copy() for k, v in model.bank.state_dict().items()}}
    logger.info(f"T-CNN 训练前验证PSNR: {best['psnr']:.4f}dB")

    def select(epoch: int, step: int, records: List[LossRecord]) -> None:
        score = validation_psnr(validation, model)
        model.train(True)
        logger.info(f"T-CNN 第 {epoch + 1} 个epoch 验证PSNR: {score:.4f}dB (最佳 {best['psnr']:.4f}dB)")
        if score > best["psnr"]:
            best.update(psnr=score, step=step, state={k: v.copy() for k, v in model.bank.state_dict().items()})
        if on_epoch is not None:
            on_epoch(epoch, step, records)

    records = run_training(model, sampler, optimizer, training, seed, "T-CNN", select)
    model.bank.load_state_dict(best["state"])
    model.train(False)
    logger.info(f"T-CNN 采用第 {best['step']} 步的参数, 验证PSNR {best['psnr']:.4f}dB")
    return model, records
