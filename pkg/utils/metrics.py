#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
评估指标
Evaluation Metrics

检测: 贪心匹配 + 全点插值 AP; 关键点: NME 与累积误差分布 (CED);
姿态: 逐角度平均绝对误差与容差曲线; 性别: 准确率。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import ConfigError, DataError, PreconditionError, ShapeError
from core.geometry import LandmarkSet, Region, iou_matrix
from core.synth_data import EYE_CENTER_INDICES, subset_positions
from utils.seeding import named_rng

logger = logging.getLogger(__name__)

POSE_ANGLES = ('roll', 'pitch', 'yaw')
NORMALIZERS = ('face_size', 'interocular')
YAW_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))


@dataclass
class EvalConfig:
    """评估参数"""
    iou_threshold: float = 0.5
    normalizer: str = 'face_size'
    normalizer_indices: Tuple[int, int] = EYE_CENTER_INDICES
    ced_max: float = 20.0
    ced_steps: int = 41
    pose_tolerance: float = 15.0
    pose_ced_max: float = 60.0
    pose_ced_steps: int = 61
    visibility_threshold: float = 0.5

    def __post_init__(self):
        self.normalizer_indices = tuple(int(i) for i in self.normalizer_indices)

    def validate(self) -> "EvalConfig":
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError('eval.iou_threshold', f"IOU 阈值必须在 (0, 1] 内, 实际 {self.iou_threshold}")
        if self.normalizer not in NORMALIZERS:
            raise ConfigError('eval.normalizer', f"可选 {NORMALIZERS}, 实际 {self.normalizer!r}")
        if len(self.normalizer_indices) != 2 or len(set(self.normalizer_indices)) != 2:
            raise ConfigError('eval.normalizer_indices', "需要两个不同的关键点下标")
        if self.ced_steps < 2 or self.ced_max <= 0:
            raise ConfigError('eval.ced_steps', "CED 网格至少 2 个点且上限为正")
        if self.pose_ced_steps < 2 or self.pose_ced_max <= 0:
            raise ConfigError('eval.pose_ced_steps', "姿态 CED 网格至少 2 个点且上限为正")
        return self

    def nme_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, self.ced_max, self.ced_steps)

    def pose_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, self.pose_ced_max, self.pose_ced_steps)


# ----------------------------------------------------------------------
# 检测

@dataclass
class MatchResult:
    """
    匹配结果 (均按输入顺序)
    flags[i] is True when detection i is a true positive; matched_gt[i] is the
    ground-truth index it matched or -1.
    """
    flags: np.ndarray
    matched_gt: np.ndarray
    gt_matched: np.ndarray
    order: np.ndarray

    @property
    def tp(self) -> int:
        return int(self.flags.sum())

    @property
    def fp(self) -> int:
        return int(len(self.flags) - self.flags.sum())


def score_order(scores: Sequence[float]) -> np.ndarray:
    """按得分降序, 并列时下标小者在前"""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def match_detections(boxes: Sequence[Region], scores: Sequence[float], gt_boxes: Sequence[Region],
                     iou_threshold: float = 0.5) -> MatchResult:
    """
    贪心匹配检测框与真值框
    Detections are visited by descending score; each takes the still-unmatched
    ground truth with the highest IOU >= threshold (lowest index on ties).
    """
    if len(boxes) != len(scores):
        raise ShapeError(f"检测框数 {len(boxes)} 与得分数 {len(scores)} 不一致")
    n_det, n_gt = len(boxes), len(gt_boxes)
    flags = np.zeros(n_det, dtype=bool)
    matched_gt = np.full(n_det, -1, dtype=np.int64)
    gt_matched = np.zeros(n_gt, dtype=bool)
    order = score_order(scores)
    if n_det and n_gt:
        overlaps = iou_matrix(boxes, gt_boxes)
        for d in order:
            candidates = np.where(~gt_matched & (overlaps[d] >= iou_threshold), overlaps[d], -1.0)
            best = int(np.argmax(candidates))
            if candidates[best] < 0:
                continue
            flags[d] = True
            matched_gt[d] = best
            gt_matched[best] = True
    return MatchResult(flags, matched_gt, gt_matched, order)


@dataclass
class PRCurve:
    """精确率-召回率曲线"""
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    iou_threshold: float = 0.5

    def points(self) -> List[List[float]]:
        return [[float(r), float(p)] for r, p in zip(self.recall, self.precision)]


def average_precision(flags: Sequence[bool], n_gt: int, iou_threshold: float = 0.5) -> PRCurve:
    """
    平均精度 (全点插值)
    ``flags`` must already be in descending-score order. AP is the area under
    the precision envelope (max precision at any recall >= r).
    """
    if n_gt < 1:
        raise PreconditionError(f"计算 AP 需要至少 1 个真值, 实际 {n_gt}")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / float(n_gt)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return PRCurve(recall, precision, ap, iou_threshold)


# ----------------------------------------------------------------------
# 关键点

def face_size_normalizer(box: Region) -> float:
    """sqrt(w·h)"""
    return float(np.sqrt(box.w * box.h))


def interocular_normalizer(gt: LandmarkSet, indices: Tuple[int, int] = EYE_CENTER_INDICES) -> float:
    """两个指定关键点之间的距离"""
    i, j = indices
    if max(i, j) >= gt.n:
        raise PreconditionError(f"归一化关键点下标 {indices} 超出关键点数 {gt.n}")
    distance = float(np.linalg.norm(gt.points[i] - gt.points[j]))
    if distance <= 0:
        raise PreconditionError("归一化距离为 0")
    return distance


def landmark_nme(pred_points, gt: LandmarkSet, normalizer: float) -> float:
    """
    归一化平均误差 (百分比)
    Mean Euclidean distance over ground-truth-visible points, divided by
    ``normalizer``.
    """
    pred = np.asarray(getattr(pred_points, 'points', pred_points), dtype=np.float64)
    if pred.shape != gt.points.shape:
        raise ShapeError(f"预测关键点 {pred.shape} 与真值 {gt.points.shape} 不一致")
    visible = gt.visibility >= 0.5
    if not visible.any():
        raise PreconditionError("真值没有可见关键点")
    if not normalizer > 0:
        raise PreconditionError(f"归一化因子必须为正: {normalizer}")
    distances = np.linalg.norm(pred[visible] - gt.points[visible], axis=1)
    return float(distances.mean() / normalizer * 100.0)


@dataclass
class CEDCurve:
    """累积误差分布曲线"""
    thresholds: np.ndarray
    fractions: np.ndarray

    def points(self) -> List[List[float]]:
        return [[float(t), float(f)] for t, f in zip(self.thresholds, self.fractions)]

    def at(self, threshold: float) -> float:
        index = int(np.searchsorted(self.thresholds, threshold, side='right')) - 1
        return float(self.fractions[index]) if index >= 0 else 0.0


def ced(values: Sequence[float], thresholds: Sequence[float]) -> CEDCurve:
    """每个阈值 t 处误差 <= t 的比例"""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise PreconditionError("CED 需要至少一个误差值")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    counts = np.searchsorted(values, thresholds, side='right')
    return CEDCurve(thresholds, counts / float(values.size))


# ----------------------------------------------------------------------
# 姿态 / 性别

@dataclass
class PoseReport:
    """逐角度平均绝对误差与容差内比例"""
    mae: Dict[str, Optional[float]]
    within_tolerance: Dict[str, Optional[float]]
    tolerance: float
    n_faces: int
    curves: Dict[str, CEDCurve] = field(default_factory=dict)

    def as_dict(self) -> Dict:
        return {
            'mae': self.mae,
            'within_tolerance': self.within_tolerance,
            'tolerance': self.tolerance,
            'n_faces': self.n_faces,
            'ced': {angle: curve.points() for angle, curve in self.curves.items()},
        }


def pose_report(pred_deg, gt_deg, tolerance: float = 15.0,
                thresholds: Optional[Sequence[float]] = None) -> PoseReport:
    """
    姿态误差报告
    Args:
        pred_deg / gt_deg: K×3 (roll, pitch, yaw), 单位为度
    """
    pred = np.asarray(pred_deg, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_deg, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ShapeError(f"姿态预测 {pred.shape} 与真值 {gt.shape} 不一致")
    if thresholds is None:
        thresholds = np.linspace(0.0, 60.0, 61)
    if len(pred) == 0:
        empty = {angle: None for angle in POSE_ANGLES}
        return PoseReport(empty, dict(empty), tolerance, 0)
    errors = np.abs(pred - gt)
    mae = {angle: float(errors[:, i].mean()) for i, angle in enumerate(POSE_ANGLES)}
    within = {angle: float(np.mean(errors[:, i] <= tolerance)) for i, angle in enumerate(POSE_ANGLES)}
    curves = {angle: ced(errors[:, i], thresholds) for i, angle in enumerate(POSE_ANGLES)}
    return PoseReport(mae, within, float(tolerance), len(pred), curves)


def gender_accuracy(pred_labels: Sequence[int], gt_labels: Sequence[int]) -> float:
    """完全一致的比例"""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"性别预测数 {pred.shape} 与真值数 {gt.shape} 不一致")
    if pred.size == 0:
        raise PreconditionError("性别准确率需要至少一个样本")
    return float(np.mean(pred == gt))


def binned_sample(faces: Sequence, per_bin: int, seed: int = 0,
                  bins: Sequence[Tuple[float, float]] = YAW_BINS) -> List[int]:
    """
    按 |yaw| 分箱等量抽样
    Returns indices into ``faces`` (objects with ``pose_deg``), ``per_bin`` from
    each bin (fewer if a bin is short), in ascending order.
    """
    rng = named_rng(seed, 'sample', len(faces), per_bin)
    yaw = np.array([abs(float(face.pose_deg[2])) for face in faces])
    chosen: List[int] = []
    for b, (low, high) in enumerate(bins):
        upper = yaw <= high if b == len(bins) - 1 else yaw < high
        members = np.flatnonzero((yaw >= low) & upper).tolist()
        if len(members) < per_bin:
            logger.warning(f"|yaw| ∈ [{low}, {high}) 只有 {len(members)} 个样本, 少于 {per_bin}")
            chosen.extend(members)
        else:
            chosen.extend(int(i) for i in rng.choice(members, size=per_bin, replace=False))
    return sorted(chosen)


# ----------------------------------------------------------------------
# 汇总

def _normalizer(config: EvalConfig, face) -> float:
    if config.normalizer == 'interocular':
        # normalizer_indices 为完整模板下标
        try:
            indices = subset_positions(config.normalizer_indices, face.landmarks.n)
        except PreconditionError as e:
            raise ConfigError('eval.normalizer_indices', str(e)) from e
        return interocular_normalizer(face.landmarks, indices)
    return face_size_normalizer(face.box)


def evaluate(detections: Mapping[str, Sequence], records: Sequence, config: Optional[EvalConfig] = None) -> Dict:
    """
    在测试集上计算全部指标
    Args:
        detections: 图像路径 -> DetectionResult 列表
        records: DatasetRecord 列表 (真值)

    Landmark, pose and gender metrics use true-positive detections paired with
    the ground truth they matched.
    """
    config = (config or EvalConfig()).validate()
    unknown = set(detections) - {r.image_path for r in records}
    if unknown:
        logger.warning(f"{len(unknown)} 个检测结果的图像不在真值集合中, 已忽略")

    scored: List[Tuple[float, int, int, bool]] = []
    landmark_errors: List[float] = []
    n_excluded = 0
    pose_pred, pose_gt = [], []
    gender_pred, gender_gt = [], []
    n_gt = n_det = 0

    for image_index, record in enumerate(records):
        results = list(detections.get(record.image_path, []))
        gt_boxes = [face.box for face in record.faces]
        n_gt += len(gt_boxes)
        n_det += len(results)
        match = match_detections([d.box for d in results], [d.score for d in results], gt_boxes,
                                 config.iou_threshold)
        for d, result in enumerate(results):
            scored.append((float(result.score), image_index, d, bool(match.flags[d])))
            if not match.flags[d]:
                continue
            face = record.faces[int(match.matched_gt[d])]
            if result.landmarks is not None:
                try:
                    landmark_errors.append(landmark_nme(result.landmarks, face.landmarks, _normalizer(config, face)))
                except PreconditionError as e:
                    n_excluded += 1
                    logger.debug(f"{record.image_path}: 人脸不参与 NME 统计 ({e})")
            if result.pose_deg is not None:
                pose_pred.append(result.pose_deg)
                pose_gt.append(face.pose_deg)
            if result.gender is not None:
                gender_pred.append(result.gender)
                gender_gt.append(face.gender)

    scored.sort(key=lambda item: (-item[0], item[1], item[2]))
    flags = [item[3] for item in scored]
    if n_gt:
        curve = average_precision(flags, n_gt, config.iou_threshold)
        ap: Optional[float] = curve.ap
        pr_points = curve.points()
    else:
        logger.warning("真值人脸数为 0, AP 无定义")
        ap, pr_points = None, []

    landmarks_doc: Dict = {'normalizer': config.normalizer, 'nme_mean': None, 'n_faces': len(landmark_errors),
                           'n_excluded': n_excluded, 'ced': []}
    if landmark_errors:
        landmarks_doc['nme_mean'] = float(np.mean(landmark_errors))
        landmarks_doc['ced'] = ced(landmark_errors, config.nme_thresholds()).points()

    gender_doc = {'accuracy': gender_accuracy(gender_pred, gender_gt) if gender_pred else None,
                  'n_faces': len(gender_pred)}
    pose_doc = pose_report(np.array(pose_pred).reshape(-1, 3), np.array(pose_gt).reshape(-1, 3),
                           config.pose_tolerance, config.pose_thresholds()).as_dict()

    metrics = {
        'n_images': len(records),
        'n_gt': n_gt,
        'n_detections': n_det,
        'detection': {'ap': ap, 'iou_threshold': config.iou_threshold, 'tp': int(sum(flags)),
                      'fp': int(len(flags) - sum(flags)), 'n_gt': n_gt, 'pr_curve': pr_points},
        'landmarks': landmarks_doc,
        'pose': pose_doc,
        'gender': gender_doc,
    }
    validate_metrics(metrics)
    logger.info(f"评估完成: AP={ap}, NME={landmarks_doc['nme_mean']}, "
                f"姿态 MAE={pose_doc['mae']}, 性别准确率={gender_doc['accuracy']}")
    return metrics


# metrics.json 结构: 键 -> 允许的类型 (None 表示该项可为空)
METRICS_SCHEMA = {
    'n_images': (int,),
    'n_gt': (int,),
    'n_detections': (int,),
    'detection': {
        'ap': (float, None),
        'iou_threshold': (float,),
        'tp': (int,),
        'fp': (int,),
        'n_gt': (int,),
        'pr_curve': (list,),
    },
    'landmarks': {
        'normalizer': (str,),
        'nme_mean': (float, None),
        'n_faces': (int,),
        'n_excluded': (int,),
        'ced': (list,),
    },
    'pose': {
        'mae': (dict,),
        'within_tolerance': (dict,),
        'tolerance': (float,),
        'n_faces': (int,),
        'ced': (dict,),
    },
    'gender': {
        'accuracy': (float, None),
        'n_faces': (int,),
    },
}


def _check_node(doc: Mapping, schema: Mapping, prefix: str) -> None:
    missing = set(schema) - set(doc)
    if missing:
        raise DataError(f"指标缺少字段: {sorted(prefix + k for k in missing)}")
    for key, rule in schema.items():
        value = doc[key]
        if isinstance(rule, dict):
            if not isinstance(value, dict):
                raise DataError(f"指标字段 {prefix + key} 应为对象")
            _check_node(value, rule, f"{prefix}{key}.")
            continue
        if value is None:
            if None not in rule:
                raise DataError(f"指标字段 {prefix + key} 不能为空")
            continue
        types = tuple(t for t in rule if t is not None)
        if float in types:
            types = types + (int,)
        if isinstance(value, bool) or not isinstance(value, types):
            raise DataError(f"指标字段 {prefix + key} 类型错误: {type(value).__name__}")


def validate_metrics(doc: Mapping) -> Mapping:
    """按 METRICS_SCHEMA 校验指标文档"""
    _check_node(doc, METRICS_SCHEMA, '')
    return doc
