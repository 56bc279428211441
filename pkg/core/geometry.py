#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
候选框与关键点几何计算
Box and Landmark Geometry

区域采用中心参数化 {x, y, w, h}; 角点格式只出现在文件边界。
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from core.errors import PreconditionError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_FACE_PAD = 1.25


@dataclass(frozen=True)
class Region:
    """
    中心参数化区域
    Center-parameterized box: (x, y) center, w × h extent, in pixels.
    """
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise PreconditionError(f"区域宽高必须为正: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Region":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.x - self.w / 2.0, self.y - self.h / 2.0,
                self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> List[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    def key(self) -> Tuple[float, float, float, float]:
        return (float(self.x), float(self.y), float(self.w), float(self.h))

    def intersects(self, width: float, height: float) -> bool:
        """是否与图像 [0, width] × [0, height] 相交 (面积为正)"""
        x1, y1, x2, y2 = self.corners()
        return x2 > 0 and y2 > 0 and x1 < width and y1 < height


@dataclass
class LandmarkSet:
    """
    图像坐标系中的关键点
    N landmark points in image pixels plus visibility (0/1 for ground truth,
    [0, 1] for predictions).
    """
    points: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.visibility):
            raise ShapeError(f"关键点数 {len(self.points)} 与可见性数 {len(self.visibility)} 不一致")

    @property
    def n(self) -> int:
        return len(self.points)

    def visible_mask(self, threshold: float = 0.5) -> np.ndarray:
        return self.visibility >= threshold

    def is_ground_truth(self) -> bool:
        return bool(np.all((self.visibility == 0) | (self.visibility == 1)))


@dataclass
class NormalizedLandmarkSet:
    """
    相对区域归一化的关键点 (a_i, b_i)
    Landmark offsets relative to a region center, scaled by its extent.
    """
    coords: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.float64).reshape(-1)
        if len(self.coords) != len(self.visibility):
            raise ShapeError(f"关键点数 {len(self.coords)} 与可见性数 {len(self.visibility)} 不一致")

    @property
    def n(self) -> int:
        return len(self.coords)


def iou(a: Region, b: Region) -> float:
    """交并比 Intersection over union."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    inter_w = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    inter_h = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = inter_w * inter_h
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    return float(min(1.0, inter / union))


def iou_matrix(boxes_a: Sequence[Region], boxes_b: Sequence[Region]) -> np.ndarray:
    """成对交并比矩阵 (与 iou 逐项一致)"""
    matrix = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            matrix[i, j] = iou(a, b)
    return matrix


def normalize_landmarks(region: Region, lm: LandmarkSet) -> NormalizedLandmarkSet:
    """(a_i, b_i) = ((x_i - x)/w, (y_i - y)/h); 可见性原样复制"""
    coords = np.empty_like(lm.points)
    coords[:, 0] = (lm.points[:, 0] - region.x) / region.w
    coords[:, 1] = (lm.points[:, 1] - region.y) / region.h
    return NormalizedLandmarkSet(coords, lm.visibility.copy())


def denormalize_landmarks(region: Region, nlm: NormalizedLandmarkSet) -> LandmarkSet:
    """(x_i, y_i) = (a_i·w + x, b_i·h + y)"""
    points = np.empty_like(nlm.coords)
    points[:, 0] = nlm.coords[:, 0] * region.w + region.x
    points[:, 1] = nlm.coords[:, 1] * region.h + region.y
    return LandmarkSet(points, nlm.visibility.copy())


def landmark_extent_box(lm: LandmarkSet, pad: float = 1.0, square: bool = False,
                        visibility_threshold: float = 0.5) -> Region:
    """
    可见关键点的外接框 (人脸框计算器的替代实现)
    Tight box over visible landmarks, scaled by ``pad`` about its center;
    zero extents are floored at 1 pixel, ``square`` expands the shorter side.

    Raises:
        PreconditionError: 可见关键点少于 2 个
    """
    if pad <= 0:
        raise PreconditionError(f"pad 必须为正: {pad}")
    visible = lm.visible_mask(visibility_threshold)
    if int(visible.sum()) < 2:
        raise PreconditionError(f"可见关键点不足 2 个 ({int(visible.sum())}), 无法计算外接框")
    pts = lm.points[visible]
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    w = max(float(x2 - x1), 1.0) * pad
    h = max(float(y2 - y1), 1.0) * pad
    if square:
        w = h = max(w, h)
    return Region(float(x1 + x2) / 2.0, float(y1 + y2) / 2.0, w, h)


def nms(regions: Sequence[Region], scores: Sequence[float], overlap: float) -> List[int]:
    """
    贪心非极大值抑制
    Greedy NMS; a region is suppressed iff its IOU with an already kept region
    exceeds ``overlap``. Score ties go to the lower input index. Returns kept
    indices in descending-score order.
    """
    if len(regions) != len(scores):
        raise ShapeError(f"nms: 区域数 {len(regions)} 与得分数 {len(scores)} 不一致")
    if not regions:
        return []
    corners = np.array([r.corners() for r in regions], dtype=np.float64)
    areas = np.array([r.area for r in regions], dtype=np.float64)
    order = sorted(range(len(regions)), key=lambda i: (-float(scores[i]), i))

    keep: List[int] = []
    remaining = np.array(order, dtype=np.int64)
    while remaining.size:
        i = int(remaining[0])
        keep.append(i)
        rest = remaining[1:]
        xx1 = np.maximum(corners[i, 0], corners[rest, 0])
        yy1 = np.maximum(corners[i, 1], corners[rest, 1])
        xx2 = np.minimum(corners[i, 2], corners[rest, 2])
        yy2 = np.minimum(corners[i, 3], corners[rest, 3])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        ovr = np.where(inter > 0, inter / (areas[i] + areas[rest] - inter), 0.0)
        remaining = rest[ovr <= overlap]
    return keep
