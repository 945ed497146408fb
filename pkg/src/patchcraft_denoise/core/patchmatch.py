"""
时空块匹配模块: 对当前帧每个像素居中的 sqrtF x sqrtF 块, 在 B x B x (2Ts+1) 窗口内寻找n个L2最近邻

帧按半样本对称方式镜像填充 (sqrtF-1)/2, 使每个像素都拥有居中的查询块。
候选按 (距离, |t-t0|, t, y, x) 升序排序, 排序是全序, 结果与遍历顺序无关。
"""

from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..utils.data_types import FrameSequence, NeighborList, PatchSpec, SearchWindow, Tensor
from ..utils.logger import get_logger

logger = get_logger("patchmatch")

# 每批位移的距离图元素上限, 控制内存占用
_CHUNK_ELEMENTS = 1 << 22


class PatchSearchError(Exception):
    """块匹配相关异常类"""
    pass


def pad_frames(frames: np.ndarray, radius: int) -> np.ndarray:
    """对 (T, C, H, W) 的空间维做半样本对称镜像填充(边缘像素重复)"""
    return np.pad(frames, ((0, 0), (0, 0), (radius, radius), (radius, radius)), mode="symmetric")


def _temporal_range(length: int, t0: int, win: SearchWindow) -> Tuple[int, int]:
    return max(0, t0 - win.Ts), min(length - 1, t0 + win.Ts)


def _validate(seq: FrameSequence, t0: int, win: SearchWindow, n: int) -> None:
    if seq is None or len(seq) == 0:
        raise PatchSearchError("序列为空")
    if not 0 <= t0 < len(seq):
        raise PatchSearchError(f"帧序号越界: t0={t0}, 序列长度 {len(seq)}")
    if n < 1:
        raise PatchSearchError(f"近邻数必须>=1: n={n}")
    height, width = seq.frame_shape
    t_lo, t_hi = _temporal_range(len(seq), t0, win)
    # 角点像素拥有最少的候选
    fewest = (t_hi - t_lo + 1) * (min(win.half, height - 1) + 1) * (min(win.half, width - 1) + 1) - 1
    if fewest < n:
        raise PatchSearchError(f"窗口内候选数不足: 最少 {fewest} 个, 需要 n={n}")


def candidate_displacements(length: int, t0: int, height: int, width: int,
                            win: SearchWindow) -> List[Tuple[int, int, int]]:
    """
    窗口内全部非零位移 (dt, dy, dx), 按 (|dt|, dt, dy, dx) 排序

    对固定查询位置, 该顺序与 (|t-t0|, t, y, x) 的并列裁决顺序一致
    """
    t_lo, t_hi = _temporal_range(length, t0, win)
    reach_y, reach_x = min(win.half, height - 1), min(win.half, width - 1)
    displacements = [
        (dt, dy, dx)
        for dt in range(t_lo - t0, t_hi - t0 + 1)
        for dy in range(-reach_y, reach_y + 1)
        for dx in range(-reach_x, reach_x + 1)
        if (dt, dy, dx) != (0, 0, 0)
    ]
    displacements.sort(key=lambda d: (abs(d[0]), d[0], d[1], d[2]))
    return displacements


def displacement_ssd(padded: np.ndarray, t0: int, displacement: Tuple[int, int, int],
                     patch: int, height: int, width: int) -> np.ndarray:
    """
    对所有查询像素计算同一位移下的块平方差和(全部颜色通道)

    Returns:
        (H, W) 距离图, 候选块中心越出帧时为 +inf
    """
    dt, dy, dx = displacement
    out = np.full((height, width), np.inf)
    y_lo, y_hi = max(0, -dy), min(height, height - dy)
    x_lo, x_hi = max(0, -dx), min(width, width - dx)
    if y_lo >= y_hi or x_lo >= x_hi:
        return out
    query = padded[t0, :, y_lo:y_hi + patch - 1, x_lo:x_hi + patch - 1]
    other = padded[t0 + dt, :, y_lo + dy:y_hi + dy + patch - 1, x_lo + dx:x_hi + dx + patch - 1]
    diff = query - other
    squared = (diff * diff).sum(axis=0)
    # 可分离的滑动窗口求和, 先沿行再沿列
    rows = sliding_window_view(squared, patch, axis=0).sum(axis=-1)
    out[y_lo:y_hi, x_lo:x_hi] = sliding_window_view(rows, patch, axis=1).sum(axis=-1)
    return out


def search_neighbors(seq: FrameSequence, t0: int, spec: PatchSpec,
                     win: SearchWindow, n: int) -> NeighborList:
    """
    对帧t0的每个像素查找n个最近邻块

    Args:
        seq: 视频序列
        t0: 当前帧序号
        spec: 块参数
        win: 搜索窗口
        n: 近邻数

    Returns:
        逐像素近邻表, 不含查询位置自身
    """
    _validate(seq, t0, win, n)
    length = len(seq)
    height, width = seq.frame_shape
    patch = spec.sqrtF
    padded = pad_frames(seq.frames.astype(np.float64), spec.search_radius)
    displacements = candidate_displacements(length, t0, height, width, win)
    table = np.array(displacements, dtype=np.int64)

    best_d = np.full((n, height, width), np.inf)
    best_k = np.full((n, height, width), -1, dtype=np.int64)
    chunk = max(1, _CHUNK_ELEMENTS // (height * width))

    for start in range(0, len(displacements), chunk):
        block = displacements[start:start + chunk]
        block_d = np.stack([displacement_ssd(padded, t0, d, patch, height, width) for d in block])
        block_k = np.broadcast_to(
            np.arange(start, start + len(block), dtype=np.int64)[:, None, None], block_d.shape)
        # 已有结果的位移序号总是更小, 稳定排序即可保持并列裁决顺序
        cand_d = np.concatenate([best_d, block_d])
        cand_k = np.concatenate([best_k, block_k])
        order = np.argsort(cand_d, axis=0, kind="stable")[:n]
        best_d = np.take_along_axis(cand_d, order, axis=0)
        best_k = np.take_along_axis(cand_k, order, axis=0)

    if np.any(best_k < 0):
        raise PatchSearchError("存在候选数不足的查询位置")

    chosen = table[best_k]                     # (n, H, W, 3)
    rows = np.arange(height)[None, :, None]
    cols = np.arange(width)[None, None, :]
    return NeighborList(
        t0=t0,
        t=np.moveaxis(t0 + chosen[..., 0], 0, -1),
        y=np.moveaxis(rows + chosen[..., 1], 0, -1),
        x=np.moveaxis(cols + chosen[..., 2], 0, -1),
        dist=np.moveaxis(best_d, 0, -1),
    )


def brute_force_oracle(seq: FrameSequence, t0: int, spec: PatchSpec,
                       win: SearchWindow, n: int) -> NeighborList:
    """
    穷举校验实现, 仅用于小规模输入; float64逐块累加, 定义了包括并列裁决在内的标准结果
    """
    _validate(seq, t0, win, n)
    length = len(seq)
    height, width = seq.frame_shape
    patch = spec.sqrtF
    padded = pad_frames(seq.frames.astype(np.float64), spec.search_radius)
    t_lo, t_hi = _temporal_range(length, t0, win)
    half = win.half

    shape = (height, width, n)
    result_t = np.zeros(shape, dtype=np.int64)
    result_y = np.zeros(shape, dtype=np.int64)
    result_x = np.zeros(shape, dtype=np.int64)
    result_d = np.zeros(shape, dtype=np.float64)

    for y in range(height):
        for x in range(width):
            query = padded[t0, :, y:y + patch, x:x + patch]
            candidates = []
            for t in range(t_lo, t_hi + 1):
                for yy in range(max(0, y - half), min(height - 1, y + half) + 1):
                    for xx in range(max(0, x - half), min(width - 1, x + half) + 1):
                        if (t, yy, xx) == (t0, y, x):
                            continue
                        other = padded[t, :, yy:yy + patch, xx:xx + patch]
                        dist = float(np.sum((query - other) ** 2))
                        candidates.append((dist, abs(t - t0), t, yy, xx))
            candidates.sort()
            for k, (dist, _, t, yy, xx) in enumerate(candidates[:n]):
                result_t[y, x, k], result_y[y, x, k], result_x[y, x, k] = t, yy, xx
                result_d[y, x, k] = dist

    return NeighborList(t0=t0, t=result_t, y=result_y, x=result_x, dist=result_d)


def neighbors_to_tensors(neighbors: NeighborList) -> Tuple[Tensor, Tensor]:
    """
    序列化布局: 位置张量 (3, H, W, n), 三个平面依次为 t, y, x (以float32精确存放整数);
    距离张量 (H, W, n)
    """
    positions = np.stack([neighbors.t, neighbors.y, neighbors.x]).astype(np.float32)
    return positions, neighbors.dist.astype(np.float32)


def neighbors_from_tensors(t0: int, positions: Tensor, dist: Tensor) -> NeighborList:
    """neighbors_to_tensors 的逆变换"""
    if positions.ndim != 4 or positions.shape[0] != 3 or positions.shape[1:] != dist.shape:
        raise PatchSearchError(f"近邻张量形状不一致: 位置 {positions.shape}, 距离 {dist.shape}")
    coords = np.rint(positions).astype(np.int64)
    return NeighborList(t0=t0, t=coords[0], y=coords[1], x=coords[2],
                        dist=dist.astype(np.float64))
