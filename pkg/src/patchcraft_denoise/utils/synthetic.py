"""
合成视频生成模块: 平移纹理与旋转图案, 由种子完全确定, 用于小规模训练与验收
"""

from typing import Callable, List

import numpy as np

from .data_types import FrameSequence
from .logger import get_logger

logger = get_logger("synthetic")

KINDS = ("translate", "rotate")

Pattern = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _texture(rng: np.random.Generator, channels: int) -> Pattern:
    """随机正弦叠加再加若干矩形色块, 返回连续坐标上的取值函数 (C, H, W)"""
    waves = []
    for _ in range(6):
        freq = rng.uniform(0.04, 0.3) * 2 * np.pi
        angle = rng.uniform(0, np.pi)
        waves.append((freq * np.cos(angle), freq * np.sin(angle), rng.uniform(0, 2 * np.pi),
                      rng.uniform(0.03, 0.09, size=channels)))
    blocks = []
    for _ in range(8):
        center = rng.uniform(-40, 80, size=2)
        size = rng.uniform(4, 14, size=2)
        blocks.append((center, size, rng.uniform(-0.25, 0.25, size=channels)))
    base = rng.uniform(0.35, 0.65, size=channels)

    def pattern(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(base[:, None, None], (channels,) + yy.shape).copy()
        for ky, kx, phase, amp in waves:
            out += amp[:, None, None] * np.sin(ky * yy + kx * xx + phase)[None]
        for center, size, level in blocks:
            inside = (np.abs(yy - center[0]) <= size[0] / 2) & (np.abs(xx - center[1]) <= size[1] / 2)
            out += level[:, None, None] * inside[None]
        return out

    return pattern


def translating_clip(seed: int, frames: int, height: int, width: int,
                     channels: int = 1) -> FrameSequence:
    """纹理以恒定速度平移, 每帧位移不超过2个像素"""
    rng = np.random.default_rng(seed)
    pattern = _texture(rng, channels)
    velocity = rng.uniform(-2.0, 2.0, size=2)
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing="ij")
    clip = [pattern(yy - velocity[0] * t, xx - velocity[1] * t) for t in range(frames)]
    return FrameSequence(np.clip(np.stack(clip), 0.0, 1.0).astype(np.float32))


def rotating_clip(seed: int, frames: int, height: int, width: int,
                  channels: int = 1) -> FrameSequence:
    """纹理绕帧内一点匀速旋转"""
    rng = np.random.default_rng(seed)
    pattern = _texture(rng, channels)
    omega = rng.uniform(0.02, 0.06) * rng.choice([-1.0, 1.0])
    cy, cx = rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64) - cy,
                         np.arange(width, dtype=np.float64) - cx, indexing="ij")
    clip = []
    for t in range(frames):
        cos, sin = np.cos(omega * t), np.sin(omega * t)
        clip.append(pattern(cos * yy - sin * xx + cy, sin * yy + cos * xx + cx))
    return FrameSequence(np.clip(np.stack(clip), 0.0, 1.0).astype(np.float32))


def make_clip(seed: int, kind: str, frames: int, height: int, width: int,
              channels: int = 1) -> FrameSequence:
    """按类型生成一段合成视频"""
    if kind == "translate":
        return translating_clip(seed, frames, height, width, channels)
    if kind == "rotate":
        return rotating_clip(seed, frames, height, width, channels)
    raise ValueError(f"未知的合成视频类型: {kind}, 可选: {KINDS}")


def make_clips(count: int, seed: int, frames: int, height: int, width: int,
               channels: int = 1) -> List[FrameSequence]:
    """
    生成多段合成视频, 类型交替, 第i段使用种子 seed+i

    Returns:
        合成视频列表
    """
    clips = [make_clip(seed + i, KINDS[i % len(KINDS)], frames, height, width, channels)
             for i in range(count)]
    logger.info(f"生成 {count} 段合成视频, 每段 {frames} 帧, {height}x{width}x{channels}")
    return clips
