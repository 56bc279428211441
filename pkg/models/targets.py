#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
候选区域训练目标分配
Training Target Assignment

按与真值框的最大 IOU 决定各任务是否参与训练:
    检测: IOU > 0.5 为正样本, IOU < 0.35 为负样本, 其余忽略
    关键点与可见性: IOU > 0.35
    姿态与性别: IOU > 0.5
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from core.geometry import NormalizedLandmarkSet, Region, iou, normalize_landmarks

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.35
POSE_SCALE = 90.0


@dataclass
class TaskTargets:
    """单个候选区域的训练目标与各任务参与标志"""
    label: int
    detection_active: bool
    landmarks: NormalizedLandmarkSet
    landmarks_active: bool
    pose: np.ndarray
    pose_active: bool
    gender: int
    gender_active: bool
    max_iou: float = 0.0

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.n

    def active_flags(self):
        return (self.detection_active, self.landmarks_active, self.pose_active, self.gender_active)


def assign_targets(proposal: Region, annotations: Sequence, n_landmarks: int = 21,
                   positive_only_tasks: bool = False) -> TaskTargets:
    """
    为候选区域分配训练目标
    Label a proposal against the annotation with maximal IOU (first on ties).

    Args:
        proposal: 候选区域
        annotations: FaceAnnotation 列表
        n_landmarks: 无标注时关键点目标的长度
        positive_only_tasks: 关键点/可见性也只在 IOU > 0.5 时参与 (单任务网络)
    """
    empty = NormalizedLandmarkSet(np.zeros((n_landmarks, 2)), np.zeros(n_landmarks))
    if not annotations:
        return TaskTargets(0, True, empty, False, np.zeros(3), False, 0, False, 0.0)

    overlaps = [iou(proposal, face.box) for face in annotations]
    best = int(np.argmax(overlaps))
    overlap = overlaps[best]
    face = annotations[best]

    if overlap > POSITIVE_IOU:
        label, detection_active = 1, True
    elif overlap < NEGATIVE_IOU:
        label, detection_active = 0, True
    else:
        label, detection_active = 0, False

    landmark_band = POSITIVE_IOU if positive_only_tasks else NEGATIVE_IOU
    landmarks_active = overlap > landmark_band
    positive = overlap > POSITIVE_IOU

    landmarks = normalize_landmarks(proposal, face.landmarks) if landmarks_active else empty
    pose = np.asarray(face.pose_deg, dtype=np.float64) / POSE_SCALE if positive else np.zeros(3)
    gender = int(face.gender) if positive else 0
    return TaskTargets(label, detection_active, landmarks, landmarks_active,
                       pose, positive, gender, positive, float(overlap))


@dataclass
class TargetBatch:
    """
    批量目标 (数组形式, 供损失函数使用)
    Stacked targets; landmark coordinates are interleaved (a_1, b_1, a_2, ...).
    """
    labels: np.ndarray
    detection_mask: np.ndarray
    landmarks: np.ndarray
    visibility: np.ndarray
    landmark_mask: np.ndarray
    pose: np.ndarray
    pose_mask: np.ndarray
    gender: np.ndarray
    gender_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def stack(cls, targets: Sequence[TaskTargets], dtype=np.float64) -> "TargetBatch":
        def column(values):
            return np.asarray(values, dtype=dtype)

        return cls(
            labels=column([t.label for t in targets]),
            detection_mask=column([t.detection_active for t in targets]),
            landmarks=column([t.landmarks.coords.reshape(-1) for t in targets]),
            visibility=column([t.landmarks.visibility for t in targets]),
            landmark_mask=column([t.landmarks_active for t in targets]),
            pose=column([t.pose for t in targets]),
            pose_mask=column([t.pose_active for t in targets]),
            gender=column([t.gender for t in targets]),
            gender_mask=column([t.gender_active for t in targets]),
        )

    def subset(self, index) -> "TargetBatch":
        return TargetBatch(**{name: getattr(self, name)[index] for name in self.__dataclass_fields__})

    def counts(self) -> List[int]:
        masks = (self.detection_mask, self.landmark_mask, self.pose_mask, self.gender_mask)
        return [int(m.sum()) for m in masks]


def stack_targets(targets: Sequence[TaskTargets], dtype=np.float64) -> TargetBatch:
    return TargetBatch.stack(targets, dtype)
