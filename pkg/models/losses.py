#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
多任务损失函数
Multi-Task Losses

各损失对批量中每个样本给出一个值; total_loss 只在该任务激活的样本上取平均,
再按 λ 加权求和。网络输出带 logits 时交叉熵由 log-softmax 计算;
只给概率时, 概率在取对数前截断到最小正数。
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import PreconditionError, ShapeError
from core.geometry import NormalizedLandmarkSet
from core.tensor import Tensor, clamp_min, log, log_softmax2, reduce_sum, square, sub

TASKS = ('detection', 'landmarks', 'visibility', 'pose', 'gender')
DEFAULT_LAMBDAS = (1.0, 5.0, 0.5, 5.0, 2.0)
COMPONENT_KEYS = ('loss_D', 'loss_L', 'loss_V', 'loss_P', 'loss_G')


def _as_tensor(value, dtype=np.float64) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, NormalizedLandmarkSet):
        value = value.coords.reshape(-1)
    return Tensor(np.asarray(value, dtype=dtype))


def _safe_log(p: Tensor) -> Tensor:
    return log(clamp_min(p, float(np.finfo(p.dtype).tiny)))


def _binary_cross_entropy(p, label) -> Tensor:
    p = _as_tensor(p)
    label = np.asarray(label, dtype=p.dtype)
    return -((1.0 - label) * _safe_log(sub(1.0, p)) + label * _safe_log(p))


def _cross_entropy_from_logits(logits, label) -> Tensor:
    logits = _as_tensor(logits)
    label = np.asarray(label, dtype=logits.dtype)
    log_probs = log_softmax2(logits)
    return -((1.0 - label) * log_probs[..., 0] + label * log_probs[..., 1])


def detection_loss(p, label) -> Tensor:
    """−(1−l)·log(1−p) − l·log(p), 逐样本"""
    return _binary_cross_entropy(p, label)


def gender_loss(p_g, g) -> Tensor:
    """−(1−g)·log(1−p_g) − g·log(p_g); p_g 为女性 (g=1) 的概率"""
    return _binary_cross_entropy(p_g, g)


def detection_loss_from_logits(logits, label) -> Tensor:
    """与 detection_loss 相同, 输入为 ...×2 的 logits"""
    return _cross_entropy_from_logits(logits, label)


def gender_loss_from_logits(logits, g) -> Tensor:
    return _cross_entropy_from_logits(logits, g)


def landmark_loss(pred, target, visibility=None) -> Tensor:
    """
    可见性加权的欧氏损失
    (1/2N)·Σ v_i·((x̂_i − a_i)² + (ŷ_i − b_i)²); 不可见点既无损失也无梯度。

    pred/target 为交错排列的 2N 坐标 (可带批量维) 或 NormalizedLandmarkSet。
    """
    if visibility is None:
        if not isinstance(target, NormalizedLandmarkSet):
            raise PreconditionError("landmark_loss: 未提供可见性")
        visibility = target.visibility
    pred = _as_tensor(pred)
    target = target.coords.reshape(-1) if isinstance(target, NormalizedLandmarkSet) else np.asarray(target)
    visibility = np.asarray(visibility, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-1] != 2 * visibility.shape[-1]:
        raise ShapeError(f"landmark_loss: 预测 {pred.shape}, 目标 {target.shape}, 可见性 {visibility.shape} 不一致")
    n_points = visibility.shape[-1]
    weights = np.repeat(visibility, 2, axis=-1) / (2.0 * n_points)
    diff = sub(pred, np.where(weights > 0, target, 0.0).astype(pred.dtype))
    return reduce_sum(square(diff) * weights, axis=-1)


def visibility_loss(pred_v, true_v) -> Tensor:
    """(1/N)·Σ (v̂_i − v_i)²"""
    pred_v = _as_tensor(pred_v)
    true_v = np.asarray(true_v, dtype=pred_v.dtype)
    if pred_v.shape != true_v.shape:
        raise ShapeError(f"visibility_loss: 预测 {pred_v.shape} 与目标 {true_v.shape} 不一致")
    return reduce_sum(square(sub(pred_v, true_v)), axis=-1) / float(pred_v.shape[-1])


def pose_loss(pred, target) -> Tensor:
    """三个角度平方差的均值"""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise ShapeError(f"pose_loss: 预测 {pred.shape} 与目标 {target.shape} 应为 (..., 3)")
    return reduce_sum(square(sub(pred, target)), axis=-1) / 3.0


@dataclass
class HeadOutputs:
    """
    网络各任务头的批量输出
    detection/gender: B×2 概率; landmarks: B×2N; visibility: B×N (未截断); pose: B×3.
    单任务网络缺少的头为 None。
    detection_logits/gender_logits: 对应概率的 softmax 输入, 仅网络前向提供。
    """
    detection: Optional[Tensor] = None
    landmarks: Optional[Tensor] = None
    visibility: Optional[Tensor] = None
    pose: Optional[Tensor] = None
    gender: Optional[Tensor] = None
    detection_logits: Optional[Tensor] = None
    gender_logits: Optional[Tensor] = None

    @classmethod
    def from_records(cls, records: Sequence, dtype=np.float64) -> "HeadOutputs":
        """由 PredictionRecord 列表构造 (纯数据路径)"""
        def stack(values):
            return Tensor(np.asarray(values, dtype=dtype))

        first = records[0]
        return cls(
            detection=stack([[1.0 - r.detection, r.detection] for r in records]),
            landmarks=None if first.landmarks is None else stack([r.landmarks.coords.reshape(-1) for r in records]),
            visibility=None if first.landmarks is None else stack([r.landmarks.visibility for r in records]),
            pose=None if first.pose is None else stack([r.pose for r in records]),
            gender=None if first.gender_prob is None else stack([[1.0 - r.gender_prob, r.gender_prob] for r in records]),
        )


def _masked_mean(per_sample: Tensor, mask: np.ndarray) -> Tuple[Optional[Tensor], float]:
    count = float(np.sum(mask))
    if count == 0:
        return None, 0.0
    weights = np.asarray(mask, dtype=per_sample.dtype) / count
    value = reduce_sum(per_sample * weights)
    return value, float(value)


def task_losses(outputs: HeadOutputs, targets) -> List[Tuple[Optional[Tensor], float]]:
    """五个任务各自的 (可微分值或 None, 数值)"""
    results: List[Tuple[Optional[Tensor], float]] = []
    if outputs.detection_logits is not None:
        results.append(_masked_mean(detection_loss_from_logits(outputs.detection_logits, targets.labels),
                                    targets.detection_mask))
    elif outputs.detection is not None:
        results.append(_masked_mean(detection_loss(outputs.detection[:, 1], targets.labels), targets.detection_mask))
    else:
        results.append((None, 0.0))
    if outputs.landmarks is not None:
        results.append(_masked_mean(landmark_loss(outputs.landmarks, targets.landmarks, targets.visibility),
                                    targets.landmark_mask))
    else:
        results.append((None, 0.0))
    if outputs.visibility is not None:
        results.append(_masked_mean(visibility_loss(outputs.visibility, targets.visibility), targets.landmark_mask))
    else:
        results.append((None, 0.0))
    if outputs.pose is not None:
        results.append(_masked_mean(pose_loss(outputs.pose, targets.pose), targets.pose_mask))
    else:
        results.append((None, 0.0))
    if outputs.gender_logits is not None:
        results.append(_masked_mean(gender_loss_from_logits(outputs.gender_logits, targets.gender), targets.gender_mask))
    elif outputs.gender is not None:
        results.append(_masked_mean(gender_loss(outputs.gender[:, 1], targets.gender), targets.gender_mask))
    else:
        results.append((None, 0.0))
    return results


def total_loss(outputs: HeadOutputs, targets, lambdas: Sequence[float] = DEFAULT_LAMBDAS
               ) -> Tuple[Tensor, Dict[str, float]]:
    """
    加权总损失
    Σ λ_t·loss_t where loss_t averages over task-active samples only. Tasks with
    λ_t = 0 or no active sample stay out of the graph.

    Returns:
        (total, {'loss_D': ..., 'loss_L': ..., 'loss_V': ..., 'loss_P': ..., 'loss_G': ..., 'total': ...})
    """
    lambdas = tuple(float(w) for w in lambdas)
    if len(lambdas) != 5 or any(w < 0 for w in lambdas):
        raise PreconditionError(f"λ 必须为 5 个非负数: {lambdas}")

    dtype = next((t.dtype for t in (outputs.detection, outputs.landmarks, outputs.visibility,
                                     outputs.pose, outputs.gender) if t is not None), np.float64)
    total: Optional[Tensor] = None
    components: Dict[str, float] = {}
    for key, weight, (value, number) in zip(COMPONENT_KEYS, lambdas, task_losses(outputs, targets)):
        components[key] = number
        if value is None or weight == 0.0:
            continue
        term = value * weight
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), dtype=dtype))
    components['total'] = float(total)
    return total, components


def combine_components(components: Dict[str, float], lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> float:
    """由各任务损失数值按 λ 组合总损失"""
    return float(sum(w * components[k] for k, w in zip(COMPONENT_KEYS, lambdas)))
