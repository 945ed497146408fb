import csv
import math
import os
from datetime import datetime
from typing import List, Sequence

from .data_types import LayerCount, LossRecord, ModuleCount, RunReport
from .logger import get_logger


def _fmt_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def format_run_report(report: RunReport) -> List[str]:
    """
    格式化去噪运行报告

    Returns:
        Markdown行列表
    """
    lines = ["# 去噪运行报告", ""]
    if report.average_psnr is not None:
        lines.append(f"- 平均PSNR: {_fmt_db(report.average_psnr)} dB")
    if report.average_noisy_psnr is not None:
        lines.append(f"- 含噪输入平均PSNR: {_fmt_db(report.average_noisy_psnr)} dB")
    lines += ["", "## 逐帧PSNR", "", "| 帧 | 输出PSNR(dB) | 输入PSNR(dB) |", "| --- | --- | --- |"]
    for index, value in enumerate(report.frame_psnr):
        noisy = _fmt_db(report.noisy_psnr[index]) if index < len(report.noisy_psnr) else "-"
        lines.append(f"| {index} | {_fmt_db(value)} | {noisy} |")
    lines += ["", "## 配置", "", "```"]
    lines += [f"{key} = {value}" for key, value in report.config.items()]
    lines.append("```")
    return lines


def format_timings(report: RunReport) -> List[str]:
    """各阶段耗时表"""
    lines = ["# 各阶段耗时", "", "| 阶段 | 秒 |", "| --- | --- |"]
    lines += [f"| {stage} | {seconds:.3f} |" for stage, seconds in report.timings.items()]
    return lines


def format_param_report(rows: Sequence[LayerCount], summary: Sequence[ModuleCount]) -> List[str]:
    """
    格式化参数量报告

    Args:
        rows: 逐层明细, 包含 module / layer / closed_form / enumerated
        summary: 模块汇总, 包含 module / closed_form / enumerated / reference / deviation / within

    Returns:
        文本表格行列表
    """
    lines = [f"{'模块':<8}{'层':<22}{'闭式计数':>14}{'枚举计数':>14}"]
    for row in rows:
        lines.append(f"{row['module']:<8}{row['layer']:<22}{row['closed_form']:>14,}{row['enumerated']:>14,}")
    lines.append("")
    lines.append(f"{'模块':<8}{'闭式计数':>14}{'枚举计数':>14}{'参考值':>14}{'偏差':>10}  结论")
    for item in summary:
        verdict = "符合" if item["within"] else "超出容差"
        lines.append(f"{item['module']:<8}{item['closed_form']:>14,}{item['enumerated']:>14,}"
                     f"{item['reference']:>14,.0f}{item['deviation']:>10.2%}  {verdict}")
    return lines


class ReportGenerator:
    # 常量定义
    PSNR_CSV = "psnr.csv"
    RUN_REPORT = "report.md"
    TIMINGS = "timings.md"
    PARAM_REPORT = "params.txt"

    def __init__(self, output_dir: str):
        """
        初始化报告生成器

        Args:
            output_dir: 报告输出目录
        """
        self.output_dir = output_dir
        self.logger = get_logger("report_generator")
        os.makedirs(self.output_dir, exist_ok=True)

    def _get_current_time(self) -> str:
        return datetime.now().strftime("%Y-%m-%d %H:%M:%S")

    def generate_psnr_csv(self, report: RunReport) -> str:
        """逐帧PSNR写入CSV(frame, psnr, noisy_psnr)"""
        path = os.path.join(self.output_dir, self.PSNR_CSV)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "psnr", "noisy_psnr"])
            for index, value in enumerate(report.frame_psnr):
                noisy = report.noisy_psnr[index] if index < len(report.noisy_psnr) else ""
                writer.writerow([index, value, noisy])
        self.logger.info(f"生成逐帧PSNR: {path}")
        return path

    def generate_run_report(self, report: RunReport) -> str:
        """生成Markdown运行报告"""
        path = os.path.join(self.output_dir, self.RUN_REPORT)
        lines = format_run_report(report)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        self.logger.info(f"生成运行报告: {path}")
        return path

    def generate_timings(self, report: RunReport) -> str:
        """耗时与生成时间写入单独的文件"""
        path = os.path.join(self.output_dir, self.TIMINGS)
        lines = format_timings(report)
        lines.insert(1, f"生成时间: {self._get_current_time()}")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        self.logger.info(f"生成耗时记录: {path}")
        return path

    def generate_loss_csv(self, records: Sequence[LossRecord], name: str) -> str:
        """训练损失曲线写入CSV(step, mse, psnr)"""
        path = os.path.join(self.output_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "mse", "psnr"])
            for record in records:
                writer.writerow([record.step, repr(record.mse), repr(record.psnr)])
        self.logger.info(f"生成损失曲线: {path}")
        return path

    def generate_param_report(self, rows: Sequence[LayerCount],
                              summary: Sequence[ModuleCount]) -> str:
        """参数量报告写入文本文件"""
        path = os.path.join(self.output_dir, self.PARAM_REPORT)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(format_param_report(rows, summary)) + "\n")
        self.logger.info(f"生成参数量报告: {path}")
        return path
