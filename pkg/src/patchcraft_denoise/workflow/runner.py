"""
工作流运行器模块, 负责协调 邻域搜索 → 补丁拼接 → S-CNN → T-CNN 的去噪流程以及两个网络的训练
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .cache import NeighborCache, cache_key, sequence_digest
from .config import PipelineConfig
from ..core.patchcraft import augment_frame
from ..core.patchmatch import search_neighbors
from ..core.scnn import ScnnModel, scnn_forward, scnn_layer_counts, train_spatial
from ..core.sepconv import SepConv
from ..core.tensorcore import Conv2d, Conv3d
from ..core.tcnn import TcnnModel, sequence_forward, tcnn_layer_counts, train_temporal
from ..utils.checkpoint import CheckpointMismatchError, load_checkpoint, save_checkpoint
from ..utils.data_types import (FrameSequence, LayerCount, LossRecord, Mode, ModuleCount, NeighborList, NoiseSpec,
                                RunReport, SearchWindow, Tensor)
from ..utils.logger import configure_logger, get_logger
from ..utils.report_generator import ReportGenerator
from ..utils.synthetic import make_clips
from ..utils.tensor_file import write_tensor
from ..utils.videoio import add_noise, read_sequence, sequence_psnr, write_sequence

T = TypeVar("T")
R = TypeVar("R")

# 参考参数量与对应容差
REFERENCE_COUNTS = {
    "S-CNN": (1.34e6, 0.01),
    "T-CNN": (1.53e6, 0.10),
    "total": (2.87e6, 0.10),
}

# T-CNN训练序列与噪声的种子偏移, 使其与S-CNN训练数据不重叠
TEMPORAL_SEED_OFFSET = 10_000


class PipelineRunner:
    """工作流运行器, 协调去噪与训练流程"""

    def __init__(self, config: PipelineConfig):
        """
        初始化工作流运行器

        Args:
            config: 流水线配置
        """
        self.config = config
        configure_logger(self.config.output_dir, "run.log")
        self.logger = get_logger("runner")
        self.report_generator = ReportGenerator(self.config.output_dir)
        self.cache = NeighborCache(self.config.cache_dir) if self.config.cache_dir else None
        self.timings: Dict[str, float] = {}

    @contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """按输入顺序收集结果, 与并行数无关"""
        if self.config.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    # ------------------------------------------------------------------
    # 逐帧阶段
    # ------------------------------------------------------------------

    def search_sequence(self, seq: FrameSequence, window: SearchWindow) -> List[NeighborList]:
        """
        对序列每一帧做邻域搜索, 开启缓存时先查缓存

        Args:
            seq: 含噪序列
            window: 搜索窗口

        Returns:
            按帧序号排列的近邻表
        """
        patch, n = self.config.patch, self.config.n
        results: List[Optional[NeighborList]] = [None] * len(seq)
        keys: Dict[int, str] = {}
        if self.cache is not None:
            digest = sequence_digest(seq)
            for t0 in range(len(seq)):
                keys[t0] = cache_key(digest, t0, patch, window, n)
                results[t0] = self.cache.get(keys[t0], t0)

        pending = [t0 for t0, found in enumerate(results) if found is None]
        computed = self._map(lambda t0: search_neighbors(seq, t0, patch, window, n), pending)
        for t0, neighbors in zip(pending, computed):
            results[t0] = neighbors
            if self.cache is not None:
                self.cache.put(keys[t0], neighbors)
        if self.cache is not None:
            self.logger.info(f"邻域缓存命中 {len(seq) - len(pending)}/{len(seq)} 帧")
        return [r for r in results if r is not None]

    def augment_sequence(self, seq: FrameSequence, window: SearchWindow) -> List[Tensor]:
        """邻域搜索 + 补丁拼接, 返回逐帧的 (n+1, f+1, C, H, W) 增广输入"""
        with self._stage("search"):
            neighbors = self.search_sequence(seq, window)
        with self._stage("patchcraft"):
            return self._map(lambda t0: augment_frame(seq, t0, neighbors[t0], self.config.patch),
                             list(range(len(seq))))

    def spatial_pass(self, noisy: FrameSequence, model: ScnnModel, window: SearchWindow) -> Tensor:
        """逐帧S-CNN去噪, 返回 (T, C, H, W)"""
        augs = self.augment_sequence(noisy, window)
        with self._stage("scnn"):
            return np.stack([scnn_forward(aug, model)[0] for aug in augs])

    def temporal_pass(self, noisy: Tensor, spatial: Tensor, model: TcnnModel) -> Tensor:
        """滑动窗口T-CNN去噪, 返回 (T, C, H, W)"""
        with self._stage("tcnn"):
            return sequence_forward(noisy, spatial, model)

    # ------------------------------------------------------------------
    # 检查点
    # ------------------------------------------------------------------

    def load_scnn(self, path: str) -> ScnnModel:
        model = ScnnModel(self.config.scnn, seed=self.config.seed)
        load_checkpoint(path, model.bank, "scnn", self.config.scnn_identity())
        return model

    def load_tcnn(self, path: str) -> TcnnModel:
        model = TcnnModel(self.config.tcnn, seed=self.config.seed)
        load_checkpoint(path, model.bank, "tcnn", self.config.tcnn_identity())
        return model

    # ------------------------------------------------------------------
    # 去噪
    # ------------------------------------------------------------------

    def denoise(self, noisy: FrameSequence, scnn_path: str, tcnn_path: Optional[str] = None,
                clean: Optional[FrameSequence] = None) -> Tuple[FrameSequence, RunReport]:
        """
        执行去噪流程

        Args:
            noisy: 含噪序列
            scnn_path: S-CNN检查点目录
            tcnn_path: T-CNN检查点目录, 仅pacnet模式需要
            clean: 干净序列, 提供时计算逐帧PSNR

        Returns:
            (去噪序列, 运行报告)
        """
        mode = self.config.mode
        self.timings = {}
        self.logger.info(f"开始去噪, 模式 {mode.value}, 共 {len(noisy)} 帧")
        if noisy.channels != self.config.channels:
            raise ValueError(f"序列颜色通道数 {noisy.channels} 与配置 channels={self.config.channels} 不一致")
        if clean is not None and clean.frames.shape != noisy.frames.shape:
            raise ValueError(f"干净序列形状 {clean.frames.shape} 与含噪序列 {noisy.frames.shape} 不一致")

        # 1. 载入检查点, 不一致时在计算前拒绝
        self.logger.info("1. 载入检查点...")
        with self._stage("load"):
            scnn = self.load_scnn(scnn_path)
            tcnn = None
            if mode is Mode.PACNET:
                if not tcnn_path:
                    raise CheckpointMismatchError("pacnet模式需要T-CNN检查点")
                tcnn = self.load_tcnn(tcnn_path)

        # 2. 邻域搜索、补丁拼接与S-CNN
        self.logger.info("2. 邻域搜索与空间去噪...")
        spatial = self.spatial_pass(noisy, scnn, self.config.effective_window())

        # 3. 时间去噪
        output = spatial
        if tcnn is not None:
            self.logger.info("3. 时间去噪...")
            output = self.temporal_pass(noisy.frames, spatial, tcnn)
        denoised = FrameSequence(output.astype(np.float32), noisy.frame_rate)

        # 4. 统计
        self.logger.info("4. 统计PSNR...")
        report = RunReport(timings=dict(self.timings),
                           config={k: str(v) for k, v in self.config.to_flat_dict().items()})
        if clean is not None:
            report.frame_psnr, _ = sequence_psnr(clean, denoised)
            report.noisy_psnr, _ = sequence_psnr(clean, noisy)
            self.logger.info(f"平均PSNR: 输入 {report.average_noisy_psnr:.4f} dB, 输出 {report.average_psnr:.4f} dB")
        return denoised, report

    def write_outputs(self, denoised: FrameSequence, report: RunReport, output: str) -> None:
        """写出去噪序列与报告"""
        write_sequence(denoised, output)
        if report.frame_psnr:
            self.report_generator.generate_psnr_csv(report)
        self.report_generator.generate_run_report(report)
        self.report_generator.generate_timings(report)

    def augment_to_dir(self, noisy: FrameSequence, output: str) -> List[str]:
        """把逐帧增广输入写为PCT1文件 aug_%05d.pct"""
        augs = self.augment_sequence(noisy, self.config.effective_window())
        paths = []
        for t0, aug in enumerate(augs):
            path = os.path.join(output, f"aug_{t0:05d}.pct")
            write_tensor(path, aug)
            paths.append(path)
        self.logger.info(f"写出 {len(paths)} 帧增广输入, 每帧 {int(np.prod(augs[0].shape[:3]))} 个特征图")
        return paths

    # ------------------------------------------------------------------
    # 训练
    # ------------------------------------------------------------------

    def training_clips(self, data_dir: Optional[str] = None, count: Optional[int] = None,
                       temporal: bool = False) -> List[FrameSequence]:
        """
        训练用干净序列

        Args:
            data_dir: 每个子目录(或.pct文件)一段序列; 为空时生成合成视频
            count: 合成视频段数, 默认取 spatial_train.clips
            temporal: 为T-CNN生成合成视频, 种子错开 TEMPORAL_SEED_OFFSET
        """
        if data_dir:
            entries = sorted(os.listdir(data_dir))
            paths = [os.path.join(data_dir, e) for e in entries
                     if os.path.isdir(os.path.join(data_dir, e)) or e.endswith(".pct")]
            if not paths:
                raise FileNotFoundError(f"训练数据目录中没有序列: {data_dir}")
            return [read_sequence(p) for p in paths]
        height, width = self.config.synthetic_size
        seed = self.config.seed + (TEMPORAL_SEED_OFFSET if temporal else 0)
        return make_clips(count or self.config.spatial_train.clips, seed,
                          self.config.synthetic_frames, height, width, self.config.channels)

    def noisy_clip(self, clip: FrameSequence, index: int, temporal: bool = False) -> FrameSequence:
        """
        第index段训练序列的含噪版本

        噪声种子为 noise.seed + index, T-CNN训练序列另加 TEMPORAL_SEED_OFFSET
        """
        noise = self.config.noise
        seed = noise.seed + index + (TEMPORAL_SEED_OFFSET if temporal else 0)
        return add_noise(clip, NoiseSpec(sigma=noise.sigma, clipped=noise.clipped, seed=seed))

    def train_spatial(self, clips: Sequence[FrameSequence]) -> Tuple[ScnnModel, List[LossRecord], str]:
        """
        训练S-CNN并保存检查点与损失曲线

        Returns:
            (模型, 损失记录, 检查点目录)
        """
        config = self.config
        checkpoint_dir = os.path.join(config.output_dir, "scnn")
        window = config.effective_window()

        self.logger.info(f"1. 构建S-CNN训练样本, {len(clips)} 段序列...")
        samples = []
        for index, clip in enumerate(clips):
            augs = self.augment_sequence(self.noisy_clip(clip, index), window)
            samples.extend((aug, clip[t]) for t, aug in enumerate(augs))

        self.logger.info("2. 训练S-CNN...")
        model = ScnnModel(config.scnn, seed=config.seed)

        def on_epoch(epoch: int, step: int, records: List[LossRecord]) -> None:
            save_checkpoint(checkpoint_dir, model.bank, "scnn", config.scnn_identity(), step, epoch + 1)

        with self._stage("train_spatial"):
            model, records = train_spatial(samples, config.scnn, config.spatial_opt, config.spatial_train,
                                           seed=config.seed, model=model, on_epoch=on_epoch)

        self.logger.info("3. 保存损失曲线...")
        self.report_generator.generate_loss_csv(records, "scnn_loss.csv")
        return model, records, checkpoint_dir

    def train_temporal(self, clips: Sequence[FrameSequence],
                       scnn_path: str) -> Tuple[TcnnModel, List[LossRecord], str]:
        """
        在冻结的S-CNN上训练T-CNN

        序列的含噪版本使用T-CNN专用的噪声种子; 末尾约五分之一的序列留作验证,
        检查点保存验证PSNR最高的参数(训练前的恒等映射也参与比较)

        Returns:
            (模型, 损失记录, 检查点目录)
        """
        config = self.config
        checkpoint_dir = os.path.join(config.output_dir, "tcnn")

        self.logger.info("1. 载入并冻结S-CNN...")
        scnn = self.load_scnn(scnn_path)
        frozen_digest = scnn.bank.digest()

        self.logger.info(f"2. 计算S-CNN输出, {len(clips)} 段序列...")
        triples = []
        for index, clip in enumerate(clips):
            noisy = self.noisy_clip(clip, index, temporal=True)
            spatial = self.spatial_pass(noisy, scnn, config.effective_window())
            triples.append((noisy.frames, spatial, clip.frames))

        if len(triples) > 1:
            held = max(1, len(triples) // 5)
            triples, validation = triples[:-held], triples[-held:]
        else:
            self.logger.warning("只有一段训练序列, 以训练序列本身做验证")
            validation = triples

        self.logger.info(f"3. 训练T-CNN, 训练 {len(triples)} 段, 验证 {len(validation)} 段...")
        model = TcnnModel(config.tcnn, seed=config.seed)

        def on_epoch(epoch: int, step: int, records: List[LossRecord]) -> None:
            save_checkpoint(checkpoint_dir, model.bank, "tcnn", config.tcnn_identity(), step, epoch + 1)

        with self._stage("train_temporal"):
            model, records = train_temporal(triples, config.tcnn, config.temporal_opt, config.temporal_train,
                                            seed=config.seed, model=model, on_epoch=on_epoch,
                                            validation=validation)

        if scnn.bank.digest() != frozen_digest:
            raise CheckpointMismatchError("T-CNN训练过程中S-CNN参数发生了变化")
        self.logger.info("4. 保存验证最佳的参数与损失曲线...")
        epochs = -(-len(records) // config.temporal_train.steps_per_epoch)
        save_checkpoint(checkpoint_dir, model.bank, "tcnn", config.tcnn_identity(), len(records), epochs)
        self.report_generator.generate_loss_csv(records, "tcnn_loss.csv")
        return model, records, checkpoint_dir

    # ------------------------------------------------------------------
    # 参数量
    # ------------------------------------------------------------------

    def param_report(self) -> Tuple[List[LayerCount], List[ModuleCount]]:
        """
        逐层闭式计数与参数库枚举计数, 以及与参考数值的偏差

        Returns:
            (逐层明细, 模块汇总)
        """
        config = self.config
        scnn = ScnnModel(config.scnn, seed=config.seed)
        tcnn = TcnnModel(config.tcnn, seed=config.seed)

        def enumerated(bank, prefix: str) -> int:
            return int(sum(bank.value(k).size for k in bank.names() if k.startswith(prefix)))

        rows: List[LayerCount] = []
        for index, counts in enumerate(scnn_layer_counts(config.scnn)):
            rows.append(LayerCount(module="S-CNN", layer=f"block{index}",
                                   closed_form=counts["sepconv"] + counts["bn"],
                                   enumerated=enumerated(scnn.bank, f"block{index}.")))
        tcnn_names = [op.name for op in tcnn.graph.ops if isinstance(op, (Conv2d, Conv3d))]
        for name, counts in zip(tcnn_names, tcnn_layer_counts(config.tcnn)):
            rows.append(LayerCount(module="T-CNN", layer=name,
                                   closed_form=counts["weight"] + counts["bias"],
                                   enumerated=enumerated(tcnn.bank, f"{name}.")))

        totals = {
            "S-CNN": (sum(r["closed_form"] for r in rows if r["module"] == "S-CNN"),
                      scnn.bank.total_parameter_count()),
            "T-CNN": (sum(r["closed_form"] for r in rows if r["module"] == "T-CNN"),
                      tcnn.bank.total_parameter_count()),
        }
        totals["total"] = (totals["S-CNN"][0] + totals["T-CNN"][0], totals["S-CNN"][1] + totals["T-CNN"][1])

        summary: List[ModuleCount] = []
        for module, (closed, counted) in totals.items():
            reference, tolerance = REFERENCE_COUNTS[module]
            deviation = (closed - reference) / reference
            summary.append(ModuleCount(module=module, closed_form=closed, enumerated=counted,
                                       reference=reference, deviation=deviation,
                                       within=abs(deviation) <= tolerance))
            if closed != counted:
                self.logger.warning(f"{module} 闭式计数 {closed} 与枚举计数 {counted} 不一致")
        sepconv_layers = sum(isinstance(op, SepConv) for op in scnn.graph.ops)
        self.logger.info(f"参数量统计完成: S-CNN {sepconv_layers} 个SepConv块, 总计 {totals['total'][0]:,}")
        return rows, summary
