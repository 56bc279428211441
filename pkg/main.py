#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
多任务人脸分析系统
Multi-Task Face Analysis System

检测、关键点与可见性、头部姿态、性别: 合成数据 -> 分阶段训练 -> 检测 (IRP + L-NMS) -> 评估

子命令: synth, train, detect, eval, gradcheck, ablate
退出码: 0 成功, 1 用户错误, 2 内部不变量失败
"""

import argparse
import json
import logging
import os
import sys
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

from core.errors import DataError, GradCheckError, InvariantError, UserError
from core.image_processor import FaceImageProcessor, draw_detections, save_ppm, svg_overlay
from core.postprocess import DetectionResult
from core.proposals import load_proposal_file
from core.synth_data import generate_dataset, load_manifest, validate_dataset
from core.tensor import OPERATORS, corrupt_operator
from models.face_analyzer import detect
from models.multitask_net import load_network
from models.network_check import run_gradcheck_suite
from models.trainer import train
from utils.config import RunConfig
from utils.logger import setup_logger
from utils.metrics import evaluate
from utils.report_generator import (ABLATION_ROWS, EvaluationReportGenerator, ablation_report,
                                    write_json, write_metrics)

logger = logging.getLogger(__name__)

class _Parser(argparse.ArgumentParser):
    """用法错误按用户错误处理 (退出码 1)"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: 错误: {message}\n")


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config, args.set or ())
    if getattr(args, 'threads', None):
        config.threads = args.threads
    return config


# ----------------------------------------------------------------------
# 子命令

def cmd_synth(args) -> int:
    """生成合成数据集"""
    config = _load_config(args)
    manifest_path = generate_dataset(config.seed, config.synth.n_train, config.synth.n_test, config.synth,
                                     args.out, threads=config.threads, progress=not args.quiet)
    validate_dataset(manifest_path)
    return 0


def cmd_train(args) -> int:
    """分阶段训练"""
    config = _load_config(args)
    spec = config.network_spec(args.arch, args.task) if args.arch else config.network_spec()
    result = train(args.data, spec, config.train, seed=config.seed, checkpoint_path=args.out,
                   progress=not args.quiet)
    logger.info(f"训练完成: {result.checkpoint_path}")
    return 0


def _detection_inputs(path: str, split: str) -> List[str]:
    if os.path.isfile(path) and path.lower().endswith(tuple(FaceImageProcessor().supported_formats)):
        return [path]
    if os.path.isdir(path) or path.endswith('.json'):
        return [record.image_path for record in load_manifest(path).records(split)]
    raise DataError("输入应为图像文件、数据集目录或 manifest.json", path)


def cmd_detect(args) -> int:
    """对图像或数据集运行检测"""
    config = _load_config(args)
    # 先加载检查点, 失败时不产生任何输出
    network = load_network(args.checkpoint)
    images = _detection_inputs(args.input, args.split)
    proposals = {}
    if args.proposals:
        proposals = {os.path.abspath(k): v for k, v in load_proposal_file(args.proposals).items()}

    processor = FaceImageProcessor()
    lines: List[str] = []
    annotated: Dict[str, tuple] = OrderedDict()
    for index, image_path in enumerate(images):
        image = processor.load_image(image_path)
        results = detect(network, image, config.pipeline, proposals.get(os.path.abspath(image_path)),
                         seed=config.seed, threads=config.threads)
        for result in results:
            doc = result.to_dict(image=image_path, visibility_threshold=config.pipeline.visibility_threshold)
            lines.append(json.dumps(doc, sort_keys=True))
        if args.annotate:
            annotated[image_path] = (image, results)
        logger.info(f"[{index + 1}/{len(images)}] {image_path}: {len(results)} 张人脸")

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, 'detections.jsonl')
    with open(out_path, 'w', encoding='utf-8', newline='\n') as f:
        for line in lines:
            f.write(line + '\n')
    for image_path, (image, results) in annotated.items():
        stem = os.path.join(args.out, 'annotated', os.path.splitext(os.path.basename(image_path))[0])
        os.makedirs(os.path.dirname(stem), exist_ok=True)
        save_ppm(f"{stem}.ppm", draw_detections(image, results))
        svg_overlay(image, results, f"{stem}.svg")
    logger.info(f"检测结果已写入: {out_path} ({len(lines)} 条)")
    return 0


def load_detections(path: str) -> Dict[str, List[DetectionResult]]:
    """读取 detections.jsonl, 按图像分组"""
    if not os.path.exists(path):
        raise DataError("检测结果文件不存在", path)
    grouped: Dict[str, List[DetectionResult]] = OrderedDict()
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                grouped.setdefault(doc['image'], []).append(DetectionResult.from_dict(doc))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"第 {line_no} 行解析失败: {e}", path) from e
    return grouped


def cmd_eval(args) -> int:
    """评估检测结果"""
    config = _load_config(args)
    records = load_manifest(args.data).records(args.split)
    metrics = evaluate(load_detections(args.results), records, config.eval)
    write_metrics(metrics, args.out, svg=args.svg)
    if args.pdf:
        EvaluationReportGenerator().generate_report(metrics, os.path.join(args.out, 'report.pdf'))
    return 0


def cmd_gradcheck(args) -> int:
    """梯度检验"""
    config = _load_config(args)
    spec = config.network_spec()
    if args.corrupt_op:
        if args.corrupt_op not in OPERATORS:
            raise UserError(f"未知算子 {args.corrupt_op!r}, 可选 {sorted(OPERATORS)}")
        with corrupt_operator(args.corrupt_op):
            report = run_gradcheck_suite(spec, config.gradcheck, config.seed, config.lambdas())
    else:
        report = run_gradcheck_suite(spec, config.gradcheck, config.seed, config.lambdas())

    for block in report.blocks:
        print(f"{block.name:<32} checked={block.checked:<4} skipped={block.skipped:<3} "
              f"max_rel={block.max_relative_error:.3e}")
    print(f"max relative error: {report.max_relative_error:.3e} (tolerance {report.tolerance:.1e})")
    if args.out:
        write_json(report.as_dict(), args.out)
    if not report.passed:
        raise GradCheckError(f"梯度检验失败: 最大相对误差 {report.max_relative_error:.3e} "
                             f">= {report.tolerance:.1e}")
    return 0


def cmd_ablate(args) -> int:
    """六种结构端到端消融"""
    config = _load_config(args)
    manifest = load_manifest(args.data)
    ckpt_dir = os.path.join(args.out, 'checkpoints')
    variants = [('fused', None), ('shared-trunk', None), ('single-task', 'detection'),
                ('single-task', 'fiducial'), ('single-task', 'pose'), ('single-task', 'gender')]

    checkpoints: Dict[str, object] = OrderedDict()
    stage_a = None
    for (arch, task), name in zip(variants, ABLATION_ROWS):
        spec = config.network_spec(arch, task)
        result = train(manifest, spec, config.train, seed=config.seed,
                       checkpoint_path=os.path.join(ckpt_dir, f"{name}.mfk"),
                       stage_a=stage_a, progress=not args.quiet)
        stage_a = result.stage_a
        checkpoints[name] = result.network

    frame = ablation_report(checkpoints, manifest.records(args.split), args.out, config.pipeline,
                            config.eval, threads=config.threads, seed=config.seed)
    print(frame.to_string(na_rep='N/A'))
    return 0


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='配置文件 (section.key = value)')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='覆盖配置项, 可重复')
    common.add_argument('--threads', type=int, help='工作线程数上限')
    common.add_argument('--quiet', action='store_true', help='只输出警告与错误, 不显示进度条')
    common.add_argument('--log-dir', default='logs', help="日志目录 (空字符串表示不写日志文件)")

    parser = _Parser(
        prog='main.py',
        description='多任务人脸分析系统 (Multi-Task Face Analysis System)',
        epilog=RunConfig.describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('synth', parents=[common], help='生成合成数据集')
    p.add_argument('--out', required=True, help='输出目录')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('train', parents=[common], help='分阶段训练')
    p.add_argument('--data', required=True, help='数据集目录或 manifest.json')
    p.add_argument('--out', required=True, help='检查点路径')
    p.add_argument('--arch', choices=['fused', 'shared-trunk', 'single-task'], help='覆盖 network.arch')
    p.add_argument('--task', choices=['detection', 'fiducial', 'pose', 'gender'], help='单任务网络的任务')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('detect', parents=[common], help='检测人脸')
    p.add_argument('--checkpoint', required=True, help='检查点路径')
    p.add_argument('--input', required=True, help='图像文件、数据集目录或 manifest.json')
    p.add_argument('--split', default='test', help='数据集划分')
    p.add_argument('--proposals', help='候选区域文件 (image_path cx cy w h)')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--annotate', action='store_true', help='输出标注图像 (PPM + SVG)')
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser('eval', parents=[common], help='评估检测结果')
    p.add_argument('--results', required=True, help='detections.jsonl')
    p.add_argument('--data', required=True, help='数据集目录或 manifest.json')
    p.add_argument('--split', default='test', help='数据集划分')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--svg', action='store_true', help='输出 SVG 曲线图')
    p.add_argument('--pdf', action='store_true', help='输出 PDF 报告')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('gradcheck', parents=[common], help='梯度检验')
    p.add_argument('--out', help='报告 JSON 路径')
    p.add_argument('--corrupt-op', help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('ablate', parents=[common], help='六种结构消融实验')
    p.add_argument('--data', required=True, help='数据集目录或 manifest.json')
    p.add_argument('--split', default='test', help='评估使用的数据集划分')
    p.add_argument('--out', required=True, help='输出目录')
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logger(logging.WARNING if args.quiet else logging.INFO, args.log_dir or None)

    try:
        return args.func(args)
    except UserError as e:
        logger.error(str(e))
        return 1
    except InvariantError as e:
        logger.error(str(e))
        return 2
    except Exception as e:
        logger.error(f"内部错误: {type(e).__name__}: {str(e)}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
