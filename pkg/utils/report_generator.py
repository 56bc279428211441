#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
评估报告生成器
Evaluation Report Generator

metrics.json, 曲线 CSV (threshold,value), 可选 SVG 曲线图与 PDF 报告,
以及六种结构的消融对比表。
"""

import json
import logging
import os
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib
import numpy as np
import pandas as pd

# 设置matplotlib后端
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

try:
    from reportlab.lib import colors
    from reportlab.lib.enums import TA_CENTER
    from reportlab.lib.pagesizes import A4
    from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
    from reportlab.lib.units import inch
    from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle
except ImportError:
    # reportlab 未安装时退回文本报告
    SimpleDocTemplate = None

from core.errors import DataError, PreconditionError
from core.geometry import denormalize_landmarks
from models.face_analyzer import PipelineConfig, detect, infer_regions
from models.multitask_net import Network, load_network
from utils.metrics import (POSE_ANGLES, EvalConfig, evaluate, face_size_normalizer,
                           gender_accuracy, interocular_normalizer, landmark_nme, pose_report)

logger = logging.getLogger(__name__)

ABLATION_ROWS = ('fused', 'shared-trunk', 'single-task-detection', 'single-task-fiducial',
                 'single-task-pose', 'single-task-gender')
ABLATION_COLUMNS = ('ap', 'nme', 'pose_mae', 'gender_accuracy')
SVG_HASH_SALT = 'face-analysis'


def _json_ready(value):
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return None if not np.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(doc: Mapping, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(_json_ready(doc), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    return path


def write_curve_csv(points: Sequence[Sequence[float]], path: str) -> str:
    """曲线写为两列 CSV: threshold,value"""
    frame = pd.DataFrame([list(p) for p in points], columns=['threshold', 'value'])
    frame.to_csv(path, index=False, lineterminator='\n', float_format='%.10g')
    return path


def metric_curves(metrics: Mapping) -> Dict[str, List]:
    """指标文档中的全部曲线: 名称 -> 点列表"""
    curves = {'pr': metrics['detection']['pr_curve'], 'ced_nme': metrics['landmarks']['ced']}
    for angle in POSE_ANGLES:
        curves[f'ced_pose_{angle}'] = metrics['pose']['ced'].get(angle, [])
    return curves


def write_metrics(metrics: Mapping, out_dir: str, svg: bool = False) -> Dict[str, str]:
    """
    写出 metrics.json 与曲线 CSV (可选 SVG)
    Returns name -> written path.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = {'metrics': write_json(metrics, os.path.join(out_dir, 'metrics.json'))}
    for name, points in metric_curves(metrics).items():
        written[name] = write_curve_csv(points, os.path.join(out_dir, f'{name}.csv'))
        if svg and points:
            written[f'{name}_svg'] = plot_curve(points, name, os.path.join(out_dir, f'{name}.svg'))
    logger.info(f"评估结果已写入: {out_dir} ({len(written)} 个文件)")
    return written


def plot_curve(points: Sequence[Sequence[float]], title: str, path: str) -> str:
    """SVG 折线图 (固定哈希盐, 不写日期)"""
    matplotlib.rcParams['svg.hashsalt'] = SVG_HASH_SALT
    data = np.asarray(points, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4, 3))
    if title == 'pr':
        ax.plot(data[:, 0], data[:, 1], drawstyle='steps-post')
        ax.set_xlabel('recall')
        ax.set_ylabel('precision')
    else:
        ax.plot(data[:, 0], data[:, 1])
        ax.set_xlabel('error threshold')
        ax.set_ylabel('fraction of faces')
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(True, linewidth=0.3)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path


class EvaluationReportGenerator:
    """评估报告生成器 (PDF, 不可用时退回文本)"""

    def __init__(self):
        """初始化报告生成器"""
        self.styles = None
        if SimpleDocTemplate:
            self.styles = getSampleStyleSheet()
            self._create_custom_styles()

    def _create_custom_styles(self):
        """创建自定义样式"""
        self.title_style = ParagraphStyle(
            'CustomTitle',
            parent=self.styles['Heading1'],
            fontSize=18,
            spaceAfter=30,
            alignment=TA_CENTER,
            textColor=colors.darkblue
        )
        self.heading_style = ParagraphStyle(
            'CustomHeading',
            parent=self.styles['Heading2'],
            fontSize=14,
            spaceAfter=12,
            textColor=colors.darkblue
        )
        self.body_style = ParagraphStyle(
            'CustomBody',
            parent=self.styles['Normal'],
            fontSize=11,
            spaceAfter=6
        )

    @staticmethod
    def _summary_rows(metrics: Mapping) -> List[List[str]]:
        def fmt(value, pattern='{:.4f}'):
            return 'N/A' if value is None else pattern.format(value)

        rows = [
            ['Images', str(metrics['n_images'])],
            ['Ground-truth faces', str(metrics['n_gt'])],
            ['Detections', str(metrics['n_detections'])],
            [f"AP @ IOU {metrics['detection']['iou_threshold']}", fmt(metrics['detection']['ap'])],
            [f"NME ({metrics['landmarks']['normalizer']}, %)", fmt(metrics['landmarks']['nme_mean'])],
        ]
        for angle in POSE_ANGLES:
            rows.append([f"Pose MAE {angle} (deg)", fmt(metrics['pose']['mae'].get(angle))])
        rows.append(['Gender accuracy', fmt(metrics['gender']['accuracy'])])
        return rows

    def generate_report(self, metrics: Mapping, output_path: str,
                        ablation: Optional[pd.DataFrame] = None) -> str:
        """
        生成评估报告
        Generate a PDF report; falls back to a text file when reportlab is
        missing or fails. Returns the written path.
        """
        try:
            if not SimpleDocTemplate:
                logger.warning("ReportLab未安装，改为生成文本报告")
                return self._generate_text_report(metrics, output_path, ablation)

            doc = SimpleDocTemplate(output_path, pagesize=A4, invariant=1)
            story = [Paragraph("Multi-Task Face Analysis: Evaluation", self.title_style), Spacer(1, 20),
                     Paragraph("Summary", self.heading_style)]
            story.append(self._table(self._summary_rows(metrics), [3 * inch, 2 * inch]))
            if ablation is not None:
                story.extend([Spacer(1, 20), Paragraph("Architecture ablation", self.heading_style)])
                rows = [['architecture'] + list(ABLATION_COLUMNS)]
                for name, row in ablation.iterrows():
                    rows.append([name] + ['N/A' if pd.isna(row[c]) else f"{row[c]:.4f}" for c in ABLATION_COLUMNS])
                story.append(self._table(rows, [1.8 * inch] + [1.1 * inch] * len(ABLATION_COLUMNS)))
            doc.build(story)
            logger.info(f"PDF报告生成成功: {output_path}")
            return output_path
        except Exception as e:
            logger.error(f"PDF报告生成失败: {str(e)}")
            return self._generate_text_report(metrics, output_path, ablation)

    @staticmethod
    def _table(rows, widths):
        table = Table(rows, colWidths=widths)
        table.setStyle(TableStyle([
            ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
            ('FONTNAME', (0, 0), (-1, -1), 'Helvetica'),
            ('FONTSIZE', (0, 0), (-1, -1), 10),
            ('GRID', (0, 0), (-1, -1), 1, colors.black),
            ('BACKGROUND', (0, 0), (0, -1), colors.lightgrey),
        ]))
        return table

    def _generate_text_report(self, metrics: Mapping, output_path: str,
                              ablation: Optional[pd.DataFrame] = None) -> str:
        """生成文本格式报告（备选方案）"""
        lines = ["=== 多任务人脸分析评估报告 ===", ""]
        lines.extend(f"{label}: {value}" for label, value in self._summary_rows(metrics))
        if ablation is not None:
            lines.extend(["", "## 结构消融", ablation.to_string(na_rep='N/A')])
        text_path = os.path.splitext(output_path)[0] + '.txt'
        with open(text_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write("\n".join(lines) + "\n")
        logger.info(f"文本报告生成成功: {text_path}")
        return text_path


# ----------------------------------------------------------------------
# 消融

def gt_box_metrics(network: Network, records: Sequence, eval_config: Optional[EvalConfig] = None,
                   batch_size: int = 64, threads: int = 1) -> Dict[str, Optional[float]]:
    """
    在真值框上推理, 计算网络具备输出头的任务指标
    NME / pose MAE / gender accuracy from one forward pass per ground-truth
    box; metrics for heads the network lacks are None.
    """
    eval_config = (eval_config or EvalConfig()).validate()
    nmes: List[float] = []
    pose_pred, pose_gt, gender_pred, gender_gt = [], [], [], []
    for record in records:
        if not record.faces:
            continue
        image = record.load_image()
        boxes = [face.box for face in record.faces]
        for face, pred in zip(record.faces, infer_regions(network, image, boxes, batch_size, threads)):
            if pred.landmarks is not None:
                points = denormalize_landmarks(face.box, pred.landmarks)
                if eval_config.normalizer == 'interocular':
                    norm = interocular_normalizer(face.landmarks, eval_config.normalizer_indices)
                else:
                    norm = face_size_normalizer(face.box)
                try:
                    nmes.append(landmark_nme(points, face.landmarks, norm))
                except PreconditionError:
                    pass
            if pred.pose is not None:
                pose_pred.append(pred.pose_deg)
                pose_gt.append(face.pose_deg)
            if pred.gender_prob is not None:
                gender_pred.append(pred.gender)
                gender_gt.append(face.gender)

    pose_mae = None
    if pose_pred:
        report = pose_report(np.array(pose_pred), np.array(pose_gt), eval_config.pose_tolerance)
        pose_mae = float(np.mean([report.mae[a] for a in POSE_ANGLES]))
    return {
        'nme': float(np.mean(nmes)) if nmes else None,
        'pose_mae': pose_mae,
        'gender_accuracy': gender_accuracy(gender_pred, gender_gt) if gender_pred else None,
    }


def ablation_report(checkpoints: Mapping[str, object], records: Sequence, out_dir: str,
                    pipeline: Optional[PipelineConfig] = None, eval_config: Optional[EvalConfig] = None,
                    threads: int = 1, seed: int = 0) -> pd.DataFrame:
    """
    六种结构的对比表
    Args:
        checkpoints: 行名 (ABLATION_ROWS) -> 检查点路径或 Network
        records: 测试集 DatasetRecord 列表

    AP comes from the full detection pipeline, the other columns from
    ground-truth-box inference. Writes ablation.csv and ablation.json.
    """
    missing = [name for name in ABLATION_ROWS if name not in checkpoints]
    if missing:
        raise DataError(f"消融实验缺少检查点: {missing}")
    pipeline = pipeline or PipelineConfig()
    eval_config = (eval_config or EvalConfig()).validate()

    rows = []
    for name in ABLATION_ROWS:
        source = checkpoints[name]
        network = source if isinstance(source, Network) else load_network(str(source))
        row: Dict[str, Optional[float]] = {'architecture': name, 'ap': None}
        if 'detection' in network.heads:
            detections = {r.image_path: detect(network, r.load_image(), pipeline, seed=seed, threads=threads)
                          for r in records}
            row['ap'] = evaluate(detections, records, eval_config)['detection']['ap']
        row.update(gt_box_metrics(network, records, eval_config, pipeline.batch_size, threads))
        rows.append(row)
        logger.info(f"消融 {name}: " + ", ".join(f"{c}={row[c]}" for c in ABLATION_COLUMNS))

    frame = pd.DataFrame(rows, columns=['architecture'] + list(ABLATION_COLUMNS)).set_index('architecture')
    frame = frame.astype(float)
    os.makedirs(out_dir, exist_ok=True)
    frame.to_csv(os.path.join(out_dir, 'ablation.csv'), lineterminator='\n', float_format='%.10g')
    write_json({'columns': list(ABLATION_COLUMNS),
                'rows': [{'architecture': name, **{c: row[c] for c in ABLATION_COLUMNS}} for name, row in
                         zip(ABLATION_ROWS, rows)],
                'orderings': ablation_orderings(frame)},
               os.path.join(out_dir, 'ablation.json'))
    return frame


def ablation_orderings(frame: pd.DataFrame) -> Dict[str, Optional[bool]]:
    """定性对比快照 (仅记录, 不做判定)"""
    def compare(a, b, better):
        if pd.isna(a) or pd.isna(b):
            return None
        return bool(better(a, b))

    return {
        'multitask_ap_ge_single_task': compare(frame.loc['fused', 'ap'], frame.loc['single-task-detection', 'ap'],
                                               lambda a, b: a >= b),
        'fused_nme_le_shared_trunk': compare(frame.loc['fused', 'nme'], frame.loc['shared-trunk', 'nme'],
                                             lambda a, b: a <= b),
    }
