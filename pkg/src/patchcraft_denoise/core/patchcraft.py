"""
补丁拼接帧模块: 由近邻表构建f个偏移帧组, 计算得分图并组装S-CNN输入张量
"""

from typing import List, Sequence, Tuple

import numpy as np

from .patchmatch import pad_frames
from ..utils.data_types import FrameSequence, NeighborList, PatchCraftGroup, PatchSpec, Tensor
from ..utils.logger import get_logger

logger = get_logger("patchcraft")


class PatchCraftError(Exception):
    """补丁拼接相关异常类"""
    pass


def cell_starts(size: int, sqrtf: int, offset: int) -> np.ndarray:
    """
    一个轴上的拼接单元起点(原帧坐标)

    帧先镜像外推 sqrtf-1, 单元从外推平面的offset处开始无重叠平铺, 直到覆盖原帧
    """
    pad = sqrtf - 1
    first = offset - pad
    count = -(-(size - first) // sqrtf)
    return first + sqrtf * np.arange(count)


def _axis_lookup(size: int, sqrtf: int, offset: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    对原帧每个坐标返回 (查询坐标, 相对查询的位移)

    查询坐标为所在单元中心; 中心落在镜像区时取最近的帧内坐标
    """
    starts = cell_starts(size, sqrtf, offset)
    coords = np.arange(size)
    cell = (coords - starts[0]) // sqrtf
    centers = starts[cell] + (sqrtf - 1) // 2
    query = np.clip(centers, 0, size - 1)
    return query, coords - query


def build_group(seq: FrameSequence, t0: int, neighbors: NeighborList,
                spec: PatchSpec, offset: Tuple[int, int]) -> PatchCraftGroup:
    """
    构建一个偏移对应的 n+1 帧组

    Args:
        seq: 视频序列(近邻位置所引用的帧)
        t0: 当前帧序号
        neighbors: 当前帧的逐像素近邻表
        spec: 块参数
        offset: (v_offs, h_offs), 每个分量位于[0, sqrtf)

    Returns:
        帧组, 第0帧为当前帧副本, 第j帧由第j近邻的中央区域拼接而成
    """
    v_offs, h_offs = offset
    if not (0 <= v_offs < spec.sqrtf and 0 <= h_offs < spec.sqrtf):
        raise PatchCraftError(f"偏移 {offset} 超出范围[0, {spec.sqrtf})")
    height, width = seq.frame_shape
    if neighbors.frame_shape != (height, width):
        raise PatchCraftError(f"近邻表尺寸 {neighbors.frame_shape} 与帧尺寸 {(height, width)} 不一致")
    if neighbors.t0 != t0:
        raise PatchCraftError(f"近邻表属于帧 {neighbors.t0}, 而不是帧 {t0}")
    if np.any(neighbors.t < 0) or np.any(neighbors.t >= len(seq)):
        raise PatchCraftError("近邻表中存在缺失或越界的条目")

    query_y, shift_y = _axis_lookup(height, spec.sqrtf, v_offs)
    query_x, shift_x = _axis_lookup(width, spec.sqrtf, h_offs)
    # 边界单元的位移可达 sqrtf-1, 可能超出匹配块
    radius = max(spec.search_radius, spec.sqrtf - 1)
    padded = pad_frames(seq.frames, radius)

    qy, qx = query_y[:, None], query_x[None, :]
    rows = np.broadcast_to(shift_y[:, None], (height, width))
    cols = np.broadcast_to(shift_x[None, :], (height, width))

    frames = np.empty((neighbors.n + 1, seq.channels, height, width), dtype=seq.frames.dtype)
    frames[0] = seq[t0]
    for j in range(neighbors.n):
        src_t = neighbors.t[qy, qx, j]
        src_y = neighbors.y[qy, qx, j] + rows + radius
        src_x = neighbors.x[qy, qx, j] + cols + radius
        # (H, W, C) → (C, H, W)
        frames[j + 1] = np.moveaxis(padded[src_t, :, src_y, src_x], -1, 0)
    return PatchCraftGroup(offset=(v_offs, h_offs), frames=frames)


def build_groups(seq: FrameSequence, t0: int, neighbors: NeighborList,
                 spec: PatchSpec) -> List[PatchCraftGroup]:
    """按行优先偏移顺序构建全部f个帧组"""
    return [build_group(seq, t0, neighbors, spec, offset) for offset in spec.offsets]


def compute_score_maps(y: Tensor, groups: Sequence[PatchCraftGroup]) -> Tensor:
    """
    得分图: d_j = (1/f) * sum_i (y - group_i.frames[j])^2

    Returns:
        (n+1, C, H, W), d_0 恒为0
    """
    if not groups:
        raise PatchCraftError("至少需要一个帧组")
    yd = y.astype(np.float64)
    total = np.zeros(groups[0].frames.shape, dtype=np.float64)
    for group in groups:
        diff = yd[None] - group.frames.astype(np.float64)
        total += diff * diff
    return (total / len(groups)).astype(groups[0].frames.dtype)


def assemble(groups: Sequence[PatchCraftGroup], scores: Tensor) -> Tensor:
    """
    沿f维拼接帧组与得分图

    Returns:
        (n+1, f+1, C, H, W), 第i组位于f序号i, 得分图位于f序号f
    """
    if not groups:
        raise PatchCraftError("至少需要一个帧组")
    shape = groups[0].frames.shape
    for group in groups:
        if group.frames.shape != shape:
            raise PatchCraftError(f"帧组 {group.offset} 形状 {group.frames.shape} 与 {shape} 不一致")
    if scores.shape != shape:
        raise PatchCraftError(f"得分图形状 {scores.shape} 与帧组形状 {shape} 不一致")
    return np.stack([group.frames for group in groups] + [scores], axis=1)


def augment_frame(seq: FrameSequence, t0: int, neighbors: NeighborList, spec: PatchSpec) -> Tensor:
    """对一帧完成 构建帧组 → 得分图 → 组装"""
    groups = build_groups(seq, t0, neighbors, spec)
    scores = compute_score_maps(seq[t0], groups)
    return assemble(groups, scores)
