import numpy as np
import pytest

from patchcraft_denoise.core.tensorcore import precision
from patchcraft_denoise.utils.data_types import FrameSequence
from patchcraft_denoise.workflow.config import PipelineConfig


@pytest.fixture
def float64():
    """在64位精度下执行测试"""
    with precision(np.float64):
        yield


@pytest.fixture
def random_sequence():
    """生成均匀随机的小序列"""

    def make(frames: int = 3, channels: int = 1, height: int = 8, width: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        return FrameSequence(rng.random((frames, channels, height, width)).astype(np.float32))

    return make


@pytest.fixture
def desk_config(tmp_path):
    """小规模预设, 输出写入临时目录"""

    def make(*overrides: str) -> PipelineConfig:
        return PipelineConfig.resolve("desk", None, [f"output_dir={tmp_path / 'out'}", *overrides])

    return make
