"""
PCT1 张量文件读写

格式: 魔数 b"PCT1", u8 维数, 每维一个 u32 小端尺寸, 随后为 prod(dims) 个小端 IEEE-754 f32 取值
"""

import os
import struct

import numpy as np

from .data_types import Tensor

MAGIC = b"PCT1"
_HEADER = struct.Struct("<4sB")


class TensorFileError(Exception):
    """PCT1文件格式异常, offset为出错的字节偏移"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (字节偏移 {offset})")
        self.offset = offset


def encode_tensor(tensor: Tensor) -> bytes:
    """将张量编码为PCT1字节串"""
    array = np.asarray(tensor)
    if array.ndim > 255:
        raise ValueError(f"维数超出u8范围: {array.ndim}")
    if any(d <= 0 or d >= 2 ** 32 for d in array.shape):
        raise ValueError(f"维度尺寸必须为正且小于2^32: {array.shape}")
    header = _HEADER.pack(MAGIC, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(payload: bytes) -> Tensor:
    """从PCT1字节串解码张量(float32)"""
    if len(payload) < _HEADER.size:
        raise TensorFileError("文件头不完整", len(payload))
    magic, rank = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise TensorFileError(f"魔数错误: {magic!r}", 0)
    offset = _HEADER.size
    dims_size = 4 * rank
    if len(payload) < offset + dims_size:
        raise TensorFileError("维度表不完整", len(payload))
    dims = struct.unpack_from(f"<{rank}I", payload, offset)
    offset += dims_size
    if any(d == 0 for d in dims):
        raise TensorFileError(f"维度尺寸必须为正: {dims}", _HEADER.size)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + 4 * count
    if len(payload) < expected:
        raise TensorFileError(f"数据不完整, 需要 {expected} 字节", len(payload))
    if len(payload) > expected:
        raise TensorFileError("文件尾部存在多余数据", expected)
    data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float32).reshape(dims)


def write_tensor(path: str, tensor: Tensor) -> None:
    """写入PCT1文件"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_tensor(tensor))


def read_tensor(path: str) -> Tensor:
    """读取PCT1文件"""
    with open(path, "rb") as f:
        return decode_tensor(f.read())
