import argparse
import math
import os
import sys
from typing import List, Optional

from patchcraft_denoise.core.patchcraft import PatchCraftError
from patchcraft_denoise.core.patchmatch import PatchSearchError
from patchcraft_denoise.core.tensorcore import NumericError, TensorCoreError
from patchcraft_denoise.utils.checkpoint import CheckpointMismatchError
from patchcraft_denoise.utils.data_types import ConfigError
from patchcraft_denoise.utils.logger import get_logger
from patchcraft_denoise.utils.report_generator import format_param_report
from patchcraft_denoise.utils.synthetic import KINDS, make_clip
from patchcraft_denoise.utils.tensor_file import TensorFileError
from patchcraft_denoise.utils.videoio import PnmFormatError, add_noise, read_sequence, sequence_psnr, write_sequence
from patchcraft_denoise.workflow.cache import CacheIntegrityError
from patchcraft_denoise.workflow.config import PipelineConfig
from patchcraft_denoise.workflow.runner import PipelineRunner

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (PnmFormatError, TensorFileError, CheckpointMismatchError, CacheIntegrityError,
                PatchSearchError, PatchCraftError, TensorCoreError, FileNotFoundError, OSError, ValueError)


class _Parser(argparse.ArgumentParser):
    """用法错误统一以退出码1结束"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: 错误: {message}\n")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="扁平 key = value 配置文件")
    parser.add_argument("--preset", default="desk", choices=["full", "desk"], help="预设, 默认desk")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="覆盖单个配置项, 可重复")
    parser.add_argument("--output-dir", help="输出目录, 等价于 --set output_dir=...")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchcraft-denoise", description="基于补丁拼接帧与可分离卷积网络的视频去噪")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    augment = sub.add_parser("augment", help="邻域搜索与补丁拼接, 写出增广输入")
    _add_config_args(augment)
    augment.add_argument("--input", required=True, help="含噪序列(帧目录或.pct)")
    augment.add_argument("--output", required=True, help="增广输入输出目录")

    spatial = sub.add_parser("train-spatial", help="训练S-CNN")
    _add_config_args(spatial)
    spatial.add_argument("--data", help="训练序列目录, 缺省时使用合成视频")

    temporal = sub.add_parser("train-temporal", help="在冻结的S-CNN上训练T-CNN")
    _add_config_args(temporal)
    temporal.add_argument("--data", help="训练序列目录, 缺省时使用合成视频")
    temporal.add_argument("--scnn", required=True, help="S-CNN检查点目录")

    denoise = sub.add_parser("denoise", help="对序列去噪")
    _add_config_args(denoise)
    denoise.add_argument("--input", required=True, help="输入序列(帧目录或.pct)")
    denoise.add_argument("--output", required=True, help="输出序列(帧目录或.pct)")
    denoise.add_argument("--scnn", required=True, help="S-CNN检查点目录")
    denoise.add_argument("--tcnn", help="T-CNN检查点目录, pacnet模式必需")
    denoise.add_argument("--mode", choices=["pacnet", "scnn3", "scnn0"], help="运行模式, 等价于 --set mode=...")
    denoise.add_argument("--clean", help="干净序列, 用于计算PSNR")
    denoise.add_argument("--add-noise", action="store_true",
                         help="输入为干净序列, 按配置加噪后去噪并以输入计算PSNR")

    psnr = sub.add_parser("psnr", help="计算两段序列的逐帧PSNR")
    _add_config_args(psnr)
    psnr.add_argument("--clean", required=True)
    psnr.add_argument("--test", required=True)

    params = sub.add_parser("params", help="参数量报告")
    _add_config_args(params)

    synthetic = sub.add_parser("make-synthetic", help="生成合成视频")
    _add_config_args(synthetic)
    synthetic.add_argument("--output", required=True, help="输出目录, 每段视频一个子目录")
    synthetic.add_argument("--count", type=int, default=1)
    synthetic.add_argument("--kind", choices=list(KINDS) + ["mixed"], default="mixed")
    synthetic.add_argument("--seed", type=int, help="起始种子, 缺省取配置中的seed")
    return parser


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.overrides)
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={args.output_dir}")
    if getattr(args, "mode", None):
        overrides.append(f"mode={args.mode}")
    config = PipelineConfig.resolve(args.preset, args.config, overrides)
    print("# 生效配置")
    for line in config.describe():
        print(line)
    return config


def _fmt_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def _run(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if args.command == "psnr":
        values, mean = sequence_psnr(read_sequence(args.clean), read_sequence(args.test))
        for index, value in enumerate(values):
            print(f"frame {index}: {_fmt_db(value)} dB")
        print(f"mean: {_fmt_db(mean)} dB")
        return EXIT_OK

    if args.command == "make-synthetic":
        seed = config.seed if args.seed is None else args.seed
        height, width = config.synthetic_size
        for index in range(args.count):
            kind = KINDS[index % len(KINDS)] if args.kind == "mixed" else args.kind
            clip = make_clip(seed + index, kind, config.synthetic_frames, height, width, config.channels)
            write_sequence(clip, os.path.join(args.output, f"clip_{index:03d}"))
        print(f"写出 {args.count} 段合成视频: {args.output}")
        return EXIT_OK

    runner = PipelineRunner(config)
    runner.logger.info("生效配置:\n" + "\n".join(config.describe()))

    if args.command == "params":
        rows, summary = runner.param_report()
        for line in format_param_report(rows, summary):
            print(line)
        runner.report_generator.generate_param_report(rows, summary)
    elif args.command == "augment":
        runner.augment_to_dir(read_sequence(args.input), args.output)
    elif args.command == "train-spatial":
        _, records, checkpoint = runner.train_spatial(runner.training_clips(args.data))
        print(f"S-CNN检查点: {checkpoint}, 最终 mse={records[-1].mse:.6g}")
    elif args.command == "train-temporal":
        clips = runner.training_clips(args.data, config.temporal_train.clips, temporal=True)
        _, records, checkpoint = runner.train_temporal(clips, args.scnn)
        print(f"T-CNN检查点: {checkpoint}, 最终 mse={records[-1].mse:.6g}")
    elif args.command == "denoise":
        source = read_sequence(args.input)
        clean = read_sequence(args.clean) if args.clean else None
        if args.add_noise:
            clean, source = source, add_noise(source, config.noise)
        denoised, report = runner.denoise(source, args.scnn, args.tcnn, clean)
        runner.write_outputs(denoised, report, args.output)
        if report.average_psnr is not None:
            print(f"平均PSNR: 输入 {_fmt_db(report.average_noisy_psnr)} dB, 输出 {_fmt_db(report.average_psnr)} dB")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """命令行入口, 返回退出码: 0成功, 1用法或配置错误, 2数据错误, 3数值错误"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logger = get_logger("cli")
    try:
        return _run(args)
    except ConfigError as e:
        print(f"配置错误: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        logger.error(f"数值错误: {e}")
        print(f"数值错误: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        logger.error(f"数据错误: {e}")
        print(f"数据错误: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
