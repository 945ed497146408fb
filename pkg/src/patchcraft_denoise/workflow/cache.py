"""
邻域搜索结果缓存

键为 (序列内容, 帧序号, 块参数, 搜索窗口, 近邻数) 的SHA-256; 每个条目由两个PCT1文件和一个记录
文件内容摘要的json组成, 使用前逐一校验, 校验失败的条目视为未命中并重新计算。
"""

import hashlib
import json
import os
from typing import Optional

import numpy as np

from ..core.patchmatch import PatchSearchError, neighbors_from_tensors, neighbors_to_tensors
from ..utils.data_types import FrameSequence, NeighborList, PatchSpec, SearchWindow
from ..utils.logger import get_logger
from ..utils.tensor_file import TensorFileError, read_tensor, write_tensor


class CacheIntegrityError(Exception):
    """缓存条目内容与记录的摘要不一致"""
    pass


def sequence_digest(seq: FrameSequence) -> str:
    """序列内容摘要(形状 + float32字节)"""
    frames = np.ascontiguousarray(seq.frames, dtype=np.float32)
    sha = hashlib.sha256()
    sha.update(repr(frames.shape).encode("ascii"))
    sha.update(frames.tobytes())
    return sha.hexdigest()


def cache_key(digest: str, t0: int, patch: PatchSpec, window: SearchWindow, n: int) -> str:
    text = f"{digest}|t0={t0}|F={patch.sqrtF}|f={patch.sqrtf}|B={window.B}|Ts={window.Ts}|n={n}"
    return hashlib.sha256(text.encode("ascii")).hexdigest()


def _file_sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class NeighborCache:
    """磁盘上的邻域搜索结果缓存"""

    def __init__(self, cache_dir: str):
        self.cache_dir = cache_dir
        self.logger = get_logger("cache")
        self.hits = 0
        self.misses = 0
        self.corrupted = 0
        os.makedirs(self.cache_dir, exist_ok=True)

    def _paths(self, key: str):
        base = os.path.join(self.cache_dir, key)
        return base + ".json", base + ".pos.pct", base + ".dist.pct"

    def verify(self, key: str) -> None:
        """校验条目的两个张量文件, 不一致时抛出CacheIntegrityError"""
        meta_path, pos_path, dist_path = self._paths(key)
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        for path, field in ((pos_path, "positions_sha256"), (dist_path, "dist_sha256")):
            if not os.path.exists(path) or _file_sha256(path) != meta.get(field):
                raise CacheIntegrityError(f"缓存条目 {key[:12]} 的文件校验失败: {os.path.basename(path)}")

    def get(self, key: str, t0: int) -> Optional[NeighborList]:
        """
        读取条目

        Returns:
            近邻表, 未命中或条目损坏时返回None
        """
        meta_path, pos_path, dist_path = self._paths(key)
        if not os.path.exists(meta_path):
            self.misses += 1
            return None
        try:
            self.verify(key)
            neighbors = neighbors_from_tensors(t0, read_tensor(pos_path), read_tensor(dist_path))
        except (CacheIntegrityError, PatchSearchError, TensorFileError, ValueError) as e:
            self.corrupted += 1
            self.misses += 1
            self.logger.warning(f"缓存条目损坏, 将重新计算: {e}")
            return None
        self.hits += 1
        return neighbors

    def put(self, key: str, neighbors: NeighborList) -> None:
        meta_path, pos_path, dist_path = self._paths(key)
        positions, dist = neighbors_to_tensors(neighbors)
        write_tensor(pos_path, positions)
        write_tensor(dist_path, dist)
        meta = {
            "t0": neighbors.t0,
            "n": neighbors.n,
            "positions_sha256": _file_sha256(pos_path),
            "dist_sha256": _file_sha256(dist_path),
        }
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2)
