"""
检查点读写: 目录内一个 manifest.json 加上每个参数/缓冲区一个PCT1文件
"""

import hashlib
import json
import os
from typing import Any, Dict, Optional

from .logger import get_logger
from .tensor_file import read_tensor, write_tensor
from ..core.tensorcore import ParamBank

logger = get_logger("checkpoint")

MANIFEST = "manifest.json"
FORMAT = "patchcraft-checkpoint/1"


class CheckpointMismatchError(Exception):
    """检查点与当前配置或内容不一致"""
    pass


def _file_sha256(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()


def _file_name(key: str) -> str:
    return key.replace("/", "__") + ".pct"


def save_checkpoint(path: str, bank: ParamBank, network: str, config: Dict[str, Any],
                    step: int = 0, epoch: int = 0) -> str:
    """
    保存检查点

    Args:
        path: 检查点目录
        bank: 参数库
        network: 网络名称(scnn / tcnn)
        config: 网络配置的扁平字典, 载入时逐项比对
        step: 已完成步数
        epoch: 已完成epoch

    Returns:
        manifest文件路径
    """
    os.makedirs(path, exist_ok=True)
    files = {}
    for key, value in sorted(bank.state_dict().items()):
        name = _file_name(key)
        file_path = os.path.join(path, name)
        write_tensor(file_path, value)
        files[key] = {"file": name, "shape": list(value.shape), "sha256": _file_sha256(file_path)}

    manifest = {
        "format": FORMAT,
        "network": network,
        "config": config,
        "step": step,
        "epoch": epoch,
        "parameters": bank.total_parameter_count(),
        "files": files,
    }
    manifest_path = os.path.join(path, MANIFEST)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False, sort_keys=True)
    logger.info(f"保存{network}检查点: {path}, 第 {step} 步, {len(files)} 个张量")
    return manifest_path


def read_manifest(path: str) -> Dict[str, Any]:
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"检查点缺少manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT:
        raise CheckpointMismatchError(f"不支持的检查点格式: {manifest.get('format')}")
    return manifest


def load_checkpoint(path: str, bank: ParamBank, network: str,
                    config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    载入检查点到参数库

    Args:
        path: 检查点目录
        bank: 结构与检查点一致的参数库
        network: 期望的网络名称
        config: 期望的网络配置, 与manifest中记录的配置逐项比对

    Returns:
        manifest内容
    """
    manifest = read_manifest(path)
    if manifest["network"] != network:
        raise CheckpointMismatchError(f"检查点属于 {manifest['network']}, 期望 {network}")
    if config is not None and manifest["config"] != config:
        diff = sorted(k for k in set(config) | set(manifest["config"])
                      if config.get(k) != manifest["config"].get(k))
        raise CheckpointMismatchError(f"检查点配置与当前配置不一致, 差异项: {diff}")

    expected = set(bank.state_dict().keys())
    recorded = set(manifest["files"].keys())
    if expected != recorded:
        raise CheckpointMismatchError(
            f"检查点张量集合不一致, 缺少: {sorted(expected - recorded)}, 多余: {sorted(recorded - expected)}")

    state = {}
    for key, entry in manifest["files"].items():
        file_path = os.path.join(path, entry["file"])
        if _file_sha256(file_path) != entry["sha256"]:
            raise CheckpointMismatchError(f"检查点文件校验失败: {file_path}")
        state[key] = read_tensor(file_path)
    bank.load_state_dict(state)
    logger.info(f"载入{network}检查点: {path}, 第 {manifest['step']} 步")
    return manifest
