"""
视频读写模块: PPM/PGM帧、帧目录与PCT1序列、噪声合成以及PSNR
"""

import math
import os
import re
from typing import List, Tuple

import numpy as np

from .data_types import FrameSequence, NoiseSpec, Tensor
from .logger import get_logger
from .tensor_file import read_tensor, write_tensor

logger = get_logger("videoio")

FRAME_PATTERN = "frame_{:05d}.{}"
_FRAME_RE = re.compile(r"^frame_\d{5}\.(ppm|pgm)$")
_WHITESPACE = b" \t\r\n\v\f"


class PnmFormatError(Exception):
    """PPM/PGM格式异常, offset为出错的字节偏移"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (字节偏移 {offset})")
        self.offset = offset


def _next_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    """读取头部的下一个记号, 跳过空白与#注释"""
    while pos < len(data):
        if data[pos] in _WHITESPACE:
            pos += 1
        elif data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmFormatError("文件头不完整", start)
    return data[start:pos], pos


def decode_pnm(data: bytes) -> Tensor:
    """
    解码二进制PPM(P6)或PGM(P5), 仅支持maxval 255

    Returns:
        (C, H, W) float32张量, 字节v映射为v/255
    """
    magic, pos = _next_token(data, 0)
    if magic not in (b"P6", b"P5"):
        raise PnmFormatError(f"不支持的魔数: {magic!r}", 0)
    channels = 3 if magic == b"P6" else 1
    fields = []
    for name in ("宽度", "高度", "maxval"):
        token_start = pos
        token, pos = _next_token(data, pos)
        if not token.isdigit():
            raise PnmFormatError(f"{name}不是整数: {token!r}", token_start)
        fields.append(int(token))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PnmFormatError(f"尺寸必须为正: {width}x{height}", pos)
    if maxval != 255:
        raise PnmFormatError(f"仅支持maxval 255, 实际 {maxval}", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PnmFormatError("maxval之后缺少单个空白分隔符", pos)
    pos += 1

    count = width * height * channels
    if len(data) - pos < count:
        raise PnmFormatError(f"像素数据不完整, 需要 {count} 字节, 实际 {len(data) - pos}", len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
    image = pixels.reshape(height, width, channels).transpose(2, 0, 1)
    return (image.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def quantize(tensor: Tensor) -> np.ndarray:
    """[0,1] → 8位, round(clamp(x,0,1)*255), 0.5进位"""
    scaled = np.clip(np.asarray(tensor, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def encode_pnm(tensor: Tensor) -> bytes:
    """编码为P6(3通道)或P5(单通道)"""
    if tensor.ndim != 3 or tensor.shape[0] not in (1, 3):
        raise ValueError(f"帧必须为(1|3, H, W), 实际 {tensor.shape}")
    channels, height, width = tensor.shape
    magic = b"P6" if channels == 3 else b"P5"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    return header + quantize(tensor).transpose(1, 2, 0).tobytes()


def read_ppm(path: str) -> Tensor:
    """读取PPM/PGM帧"""
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def write_ppm(tensor: Tensor, path: str) -> None:
    """写入PPM/PGM帧"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_pnm(tensor))


def list_frame_files(directory: str) -> List[str]:
    """按字典序列出目录中的 frame_%05d.ppm/pgm 文件"""
    names = sorted(name for name in os.listdir(directory) if _FRAME_RE.match(name))
    return [os.path.join(directory, name) for name in names]


def read_sequence(path: str) -> FrameSequence:
    """
    读取视频序列

    Args:
        path: 帧目录或四维(T, C, H, W)的PCT1文件

    Returns:
        帧序列
    """
    if os.path.isdir(path):
        files = list_frame_files(path)
        if not files:
            raise FileNotFoundError(f"目录中没有帧文件: {path}")
        frames = [read_ppm(file) for file in files]
        shapes = {frame.shape for frame in frames}
        if len(shapes) != 1:
            raise ValueError(f"帧尺寸不一致: {sorted(shapes)}")
        return FrameSequence(np.stack(frames).astype(np.float32))

    tensor = read_tensor(path)
    if tensor.ndim != 4:
        raise ValueError(f"序列张量必须是四维(T, C, H, W), 实际形状 {tensor.shape}")
    return FrameSequence(np.clip(tensor, 0.0, 1.0).astype(np.float32))


def write_sequence(seq: FrameSequence, path: str) -> None:
    """写入视频序列, 以.pct结尾时写PCT1文件, 否则写帧目录"""
    if path.endswith(".pct"):
        write_tensor(path, seq.frames)
        return
    os.makedirs(path, exist_ok=True)
    extension = "ppm" if seq.channels == 3 else "pgm"
    for index in range(len(seq)):
        write_ppm(seq[index], os.path.join(path, FRAME_PATTERN.format(index, extension)))


def frame_noise(shape: Tuple[int, ...], seed: int, frame_index: int) -> np.ndarray:
    """
    计数器型高斯噪声: 以(seed, 帧序号)为Philox密钥, 以帧内平铺位置为流内序号

    同一(seed, 帧, 位置)总是得到同一个样本, 与调用顺序和并行方式无关
    """
    key = np.array([seed % (2 ** 64), frame_index], dtype=np.uint64)
    generator = np.random.Generator(np.random.Philox(key=key))
    return generator.standard_normal(int(np.prod(shape))).reshape(shape)


def add_noise(seq: FrameSequence, spec: NoiseSpec) -> FrameSequence:
    """
    添加独立同分布高斯噪声, 标准差 sigma/255

    Args:
        seq: 干净序列
        spec: 噪声参数, clipped为真时结果截断到[0,1]

    Returns:
        含噪序列
    """
    if spec.sigma == 0:
        return FrameSequence(seq.frames.copy(), seq.frame_rate)
    std = spec.sigma / 255.0
    noisy = np.empty(seq.frames.shape, dtype=np.float32)
    for index in range(len(seq)):
        frame = seq[index].astype(np.float64) + std * frame_noise(seq[index].shape, spec.seed, index)
        if spec.clipped:
            frame = np.clip(frame, 0.0, 1.0)
        noisy[index] = frame
    return FrameSequence(noisy, seq.frame_rate)


def psnr(clean: Tensor, test: Tensor) -> float:
    """
    峰值信噪比, 峰值为1

    Returns:
        10*log10(1/MSE), 完全一致时返回 +inf
    """
    if clean.shape != test.shape:
        raise ValueError(f"psnr: 形状不一致, clean {clean.shape}, test {test.shape}")
    diff = np.asarray(clean, dtype=np.float64) - np.asarray(test, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def sequence_psnr(clean: FrameSequence, test: FrameSequence) -> Tuple[List[float], float]:
    """逐帧PSNR及其算术平均"""
    if clean.frames.shape != test.frames.shape:
        raise ValueError(f"序列形状不一致: {clean.frames.shape} != {test.frames.shape}")
    values = [psnr(clean[i], test[i]) for i in range(len(clean))]
    return values, float(np.mean(values))
