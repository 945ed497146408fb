"""
配置文件

配置是一组扁平的 key = value 项, 依次由 预设 → 配置文件 → 命令行覆盖 得到,
再组装为各模块使用的数据类。
"""

import os
from typing import Any, Dict, Iterable, List, Optional

from ..utils.data_types import (ConfigError, Mode, NoiseSpec, OptimizerSpec, PatchSpec, ScnnConfig,
                                SearchWindow, TcnnConfig, TrainingSpec)
from ..utils.logger import get_logger

_OPTIMIZER_KEYS = ("learning_rate", "decay", "beta1", "beta2", "epsilon", "weight_decay",
                   "layerwise_trust_ratio")
_TRAINING_KEYS = ("steps", "batch", "steps_per_epoch", "crop", "clips", "log_every")

# 完整规模的默认值, 同时决定每一项的取值类型
_FULL: Dict[str, Any] = {
    "preset": "full",
    "mode": "pacnet",
    "seed": 0,
    "workers": 1,
    "channels": 3,
    "n": 14,
    "patch.sqrtF": 15,
    "patch.sqrtf": 7,
    "window.B": 89,
    "window.Ts": 3,
    "scnn.m": 7,
    "scnn.blocks": 5,
    "scnn.bn_momentum": 0.1,
    "scnn.bn_eps": 1e-5,
    "tcnn.Tt": 3,
    "tcnn.conv3d_channels": 48,
    "tcnn.conv2d_layers": 17,
    "tcnn.conv2d_channels": 96,
    "tcnn.kernel": 3,
    "tcnn.lrelu_slope": 0.1,
    "noise.sigma": 25.0,
    "noise.clipped": False,
    "noise.seed": 0,
    "spatial_opt.learning_rate": 5e-3,
    "spatial_opt.decay": 0.999,
    "spatial_opt.beta1": 0.9,
    "spatial_opt.beta2": 0.999,
    "spatial_opt.epsilon": 1e-6,
    "spatial_opt.weight_decay": 0.0,
    "spatial_opt.layerwise_trust_ratio": True,
    "temporal_opt.learning_rate": 2e-3,
    "temporal_opt.decay": 0.999,
    "temporal_opt.beta1": 0.9,
    "temporal_opt.beta2": 0.999,
    "temporal_opt.epsilon": 1e-6,
    "temporal_opt.weight_decay": 0.0,
    "temporal_opt.layerwise_trust_ratio": True,
    "spatial_train.steps": 7000,
    "spatial_train.batch": 4,
    "spatial_train.steps_per_epoch": 100,
    "spatial_train.crop": 64,
    "spatial_train.clips": 8,
    "spatial_train.log_every": 100,
    "temporal_train.steps": 7000,
    "temporal_train.batch": 4,
    "temporal_train.steps_per_epoch": 100,
    "temporal_train.crop": 64,
    "temporal_train.clips": 8,
    "temporal_train.log_every": 100,
    "synthetic.frames": 7,
    "synthetic.height": 150,
    "synthetic.width": 150,
    "output_dir": "output",
    "cache_dir": "",
}

# 小规模预设: 保持全部结构性质, 计算量约为千分之一
_DESK_OVERRIDES: Dict[str, Any] = {
    "preset": "desk",
    "channels": 1,
    "n": 4,
    "patch.sqrtF": 7,
    "patch.sqrtf": 3,
    "window.B": 15,
    "window.Ts": 1,
    "scnn.m": 3,
    "tcnn.Tt": 1,
    "tcnn.conv3d_channels": 16,
    "tcnn.conv2d_layers": 4,
    "tcnn.conv2d_channels": 24,
    "spatial_train.steps": 2000,
    "spatial_train.crop": 24,
    "temporal_train.steps": 1200,
    "temporal_train.crop": 24,
    "temporal_train.clips": 10,
    "synthetic.height": 32,
    "synthetic.width": 32,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "full": dict(_FULL),
    "desk": {**_FULL, **_DESK_OVERRIDES},
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def parse_value(key: str, text: str) -> Any:
    """按默认值的类型解析一项取值"""
    if key not in _FULL:
        raise ConfigError(f"未知的配置项: {key}")
    default = _FULL[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"配置项 {key} 的取值无效: {text!r}, 期望 {type(default).__name__}")
    return text


def parse_assignments(lines: Iterable[str], source: str = "<参数>") -> Dict[str, Any]:
    """
    解析 key = value 文本, 忽略空行与#注释

    Args:
        lines: 文本行
        source: 出错时提示的来源

    Returns:
        解析后的取值字典
    """
    values: Dict[str, Any] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} 第 {number} 行缺少'=': {raw.rstrip()}")
        key, text = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), text)
    return values


def read_config_file(path: str) -> Dict[str, Any]:
    """读取扁平配置文件"""
    if not os.path.exists(path):
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_assignments(f.readlines(), path)


class PipelineConfig:
    """流水线配置类"""

    def __init__(self, values: Dict[str, Any]):
        """
        初始化配置类

        Args:
            values: 完整的扁平配置, 键集合必须与预设一致
        """
        unknown = sorted(set(values) - set(_FULL))
        missing = sorted(set(_FULL) - set(values))
        if unknown or missing:
            raise ConfigError(f"配置项不完整, 未知: {unknown}, 缺少: {missing}")
        self.values = dict(values)
        self.logger = get_logger("config")

        v = self.values
        self.preset: str = v["preset"]
        self.seed: int = v["seed"]
        self.workers: int = v["workers"]
        self.channels: int = v["channels"]
        self.n: int = v["n"]
        self.output_dir: str = v["output_dir"]
        self.cache_dir: Optional[str] = v["cache_dir"] or None
        try:
            self.mode = Mode(v["mode"])
        except ValueError:
            raise ConfigError(f"未知的运行模式: {v['mode']}, 可选: {[m.value for m in Mode]}")

        self.patch = PatchSpec(sqrtF=v["patch.sqrtF"], sqrtf=v["patch.sqrtf"])
        self.window = SearchWindow(B=v["window.B"], Ts=v["window.Ts"])
        self.noise = NoiseSpec(sigma=v["noise.sigma"], clipped=v["noise.clipped"], seed=v["noise.seed"])
        self.scnn = ScnnConfig(n_in=self.n + 1, f_in=self.patch.f + 1, c=self.channels, m=v["scnn.m"],
                               blocks=v["scnn.blocks"], bn_momentum=v["scnn.bn_momentum"],
                               bn_eps=v["scnn.bn_eps"])
        self.tcnn = TcnnConfig(c=self.channels, Tt=v["tcnn.Tt"], conv3d_channels=v["tcnn.conv3d_channels"],
                               conv2d_layers=v["tcnn.conv2d_layers"],
                               conv2d_channels=v["tcnn.conv2d_channels"], kernel=v["tcnn.kernel"],
                               lrelu_slope=v["tcnn.lrelu_slope"])
        self.spatial_opt = OptimizerSpec(**{k: v[f"spatial_opt.{k}"] for k in _OPTIMIZER_KEYS})
        self.temporal_opt = OptimizerSpec(**{k: v[f"temporal_opt.{k}"] for k in _OPTIMIZER_KEYS})
        self.spatial_train = TrainingSpec(**{k: v[f"spatial_train.{k}"] for k in _TRAINING_KEYS})
        self.temporal_train = TrainingSpec(**{k: v[f"temporal_train.{k}"] for k in _TRAINING_KEYS})
        self.synthetic_frames: int = v["synthetic.frames"]
        self.synthetic_size = (v["synthetic.height"], v["synthetic.width"])

        self._check_config_validity()

    @classmethod
    def resolve(cls, preset: str = "desk", config_file: Optional[str] = None,
                overrides: Optional[Iterable[str]] = None) -> "PipelineConfig":
        """
        按 预设 → 配置文件 → 覆盖项 的顺序得到配置

        Args:
            preset: 预设名称, 配置文件中的preset项优先
            config_file: 扁平配置文件路径
            overrides: 形如 key=value 的覆盖项
        """
        from_file = read_config_file(config_file) if config_file else {}
        from_flags = parse_assignments(overrides or [], "--set")
        name = from_flags.get("preset", from_file.get("preset", preset))
        if name not in PRESETS:
            raise ConfigError(f"未知的预设: {name}, 可选: {sorted(PRESETS)}")
        return cls({**PRESETS[name], **from_file, **from_flags})

    @classmethod
    def from_flat_dict(cls, values: Dict[str, Any]) -> "PipelineConfig":
        """由to_flat_dict的输出重建, 缺少的项取自对应预设"""
        name = values.get("preset", "full")
        if name not in PRESETS:
            raise ConfigError(f"未知的预设: {name}")
        return cls({**PRESETS[name], **values})

    def to_flat_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def describe(self) -> List[str]:
        """完整配置的 key = value 行, 用于回显与报告"""
        return [f"{key} = {self.values[key]}" for key in _FULL]

    def effective_window(self) -> SearchWindow:
        """单帧模式强制 Ts=0"""
        if self.mode is Mode.SCNN0:
            return SearchWindow(B=self.window.B, Ts=0)
        return self.window

    def scnn_identity(self) -> Dict[str, Any]:
        """决定S-CNN结构与训练条件的配置项, 写入检查点并在载入时比对"""
        keys = ["channels", "n", "patch.sqrtF", "patch.sqrtf", "noise.sigma", "noise.clipped"]
        keys += [k for k in _FULL if k.startswith("scnn.")]
        return {k: self.values[k] for k in keys}

    def tcnn_identity(self) -> Dict[str, Any]:
        """决定T-CNN结构与训练条件的配置项"""
        keys = ["channels", "noise.sigma", "noise.clipped"] + [k for k in _FULL if k.startswith("tcnn.")]
        return {k: self.values[k] for k in keys}

    def _check_config_validity(self):
        """检查取值范围"""
        if self.n < 1:
            raise ConfigError(f"近邻数必须>=1: n={self.n}")
        if self.channels not in (1, 3):
            raise ConfigError(f"颜色通道数必须为1或3: {self.channels}")
        if self.workers < 1:
            raise ConfigError(f"并行进程数必须>=1: {self.workers}")
        if self.synthetic_frames < 1 or min(self.synthetic_size) < 1:
            raise ConfigError(f"合成视频尺寸必须为正: {self.synthetic_frames} 帧, {self.synthetic_size}")
        if self.window.B < self.patch.sqrtF:
            raise ConfigError(f"搜索窗口 B={self.window.B} 小于搜索块边长 sqrtF={self.patch.sqrtF}")
