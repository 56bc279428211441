#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
检测后处理: 迭代候选区域 (IRP) 与基于关键点的非极大值抑制 (L-NMS)
Detection Post-Processing

两个算法都只依赖一个打分函数 score_fn(regions) -> PredictionRecord 列表,
与具体网络解耦。
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import PreconditionError, ShapeError
from core.geometry import (DEFAULT_FACE_PAD, LandmarkSet, Region, denormalize_landmarks,
                           iou, landmark_extent_box, nms)
from core.proposals import ProposalSet

logger = logging.getLogger(__name__)

ScoreFn = Callable[[Sequence[Region]], List]


@dataclass
class DetectionResult:
    """
    最终检测结果
    Final box, score, image-frame landmarks with median visibilities, pose in
    degrees, gender label + probability and the number of contributing regions.
    """
    box: Region
    score: float
    landmarks: Optional[LandmarkSet] = None
    pose_deg: Optional[np.ndarray] = None
    gender: Optional[int] = None
    gender_prob: Optional[float] = None
    n_regions: int = 1

    def to_dict(self, image: Optional[str] = None, visibility_threshold: float = 0.5) -> Dict:
        doc: Dict = {}
        if image is not None:
            doc['image'] = image
        doc['box'] = self.box.as_list()
        doc['score'] = float(self.score)
        if self.landmarks is not None:
            doc['landmarks'] = [[float(x), float(y)] for x, y in self.landmarks.points]
            doc['visibility'] = [float(v) for v in self.landmarks.visibility]
            doc['visible'] = [int(v) for v in self.landmarks.visible_mask(visibility_threshold)]
        else:
            doc['landmarks'] = doc['visibility'] = doc['visible'] = None
        doc['pose_deg'] = None if self.pose_deg is None else [float(a) for a in self.pose_deg]
        doc['gender'] = None if self.gender is None else int(self.gender)
        doc['gender_prob'] = None if self.gender_prob is None else float(self.gender_prob)
        doc['n_regions'] = int(self.n_regions)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict) -> "DetectionResult":
        landmarks = None
        if doc.get('landmarks') is not None:
            landmarks = LandmarkSet(doc['landmarks'], doc['visibility'])
        pose = doc.get('pose_deg')
        return cls(
            box=Region(*[float(v) for v in doc['box']]),
            score=float(doc['score']),
            landmarks=landmarks,
            pose_deg=None if pose is None else np.asarray(pose, dtype=np.float64),
            gender=doc.get('gender'),
            gender_prob=doc.get('gender_prob'),
            n_regions=int(doc.get('n_regions', 1)),
        )


class CachedScorer:
    """
    按区域缓存的打分函数
    Identical regions are scored once, so rescoring returns bit-identical records.
    """

    def __init__(self, score_fn: ScoreFn):
        self.score_fn = score_fn
        self.cache: Dict[Tuple[float, float, float, float], object] = {}

    def __call__(self, regions: Sequence[Region]) -> List:
        missing: List[Region] = []
        seen = set()
        for region in regions:
            key = region.key()
            if key not in self.cache and key not in seen:
                missing.append(region)
                seen.add(key)
        if missing:
            for region, record in zip(missing, self.score_fn(missing)):
                self.cache[region.key()] = record
        return [self.cache[r.key()] for r in regions]


def lower_median(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """下中位数: 排序后第 ceil(n/2) - 1 个元素"""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis]
    return np.take(np.sort(values, axis=axis), (n + 1) // 2 - 1, axis=axis)


def iterative_region_proposals(score_fn: ScoreFn, initial: ProposalSet, steps: int = 1,
                               candidate_threshold: float = 0.25,
                               pad: float = DEFAULT_FACE_PAD, square: bool = True,
                               visibility_threshold: float = 0.5,
                               image_size: Optional[Tuple[int, int]] = None
                               ) -> Tuple[ProposalSet, List[float], List]:
    """
    迭代候选区域
    Score the initial boxes, keep those >= ``candidate_threshold``; each of the
    ``steps`` stages turns the newest boxes' predicted landmarks into new
    candidate boxes and appends them; finally rescore the accumulated set.

    Args:
        score_fn: regions -> PredictionRecord 列表 (需要关键点输出)
        image_size: (width, height), 用于丢弃落在图像外的新框

    Returns:
        (累积候选集合, 重新打分后的得分, 对应的 PredictionRecord)
    """
    if steps < 0:
        raise PreconditionError(f"IRP 迭代次数必须 >= 0: {steps}")
    scorer = score_fn if isinstance(score_fn, CachedScorer) else CachedScorer(score_fn)

    records = scorer(initial.regions)
    detected = [region for region, record in zip(initial.regions, records)
                if record.detection >= candidate_threshold]
    new_boxes = list(detected)
    for stage in range(1, steps + 1):
        fresh: List[Region] = []
        for region, record in zip(new_boxes, scorer(new_boxes)):
            landmarks = denormalize_landmarks(region, record.landmarks)
            try:
                box = landmark_extent_box(landmarks, pad, square, visibility_threshold)
            except PreconditionError:
                logger.debug(f"IRP 第 {stage} 轮: 区域 {region} 可见关键点不足, 跳过")
                continue
            if image_size is not None and not box.intersects(*image_size):
                logger.debug(f"IRP 第 {stage} 轮: 新框 {box} 位于图像外, 跳过")
                continue
            fresh.append(box)
        detected.extend(fresh)
        new_boxes = fresh
        logger.debug(f"IRP 第 {stage} 轮: 新增 {len(fresh)} 个候选框")

    final_records = scorer(detected)
    scores = [float(r.detection) for r in final_records]
    return ProposalSet(initial.image_ref, detected, f'irp-stage-{steps}'), scores, final_records


@dataclass
class _Candidate:
    index: int
    score: float
    precise: Region
    landmarks: LandmarkSet
    record: object


def landmark_nms(regions: Sequence[Region], records: Sequence, overlap: float = 0.3,
                 k: int = 5, final_threshold: float = 0.5, visibility_threshold: float = 0.5,
                 pad: float = DEFAULT_FACE_PAD, square: bool = True) -> List[DetectionResult]:
    """
    基于关键点的非极大值抑制
    1. 关键点还原到图像坐标; 2. 以可见关键点外接框作为精确框 (可见点 < 2 的区域丢弃);
    3. 精确框按检测得分做 NMS; 4. 每个保留的人脸从与其精确框 IOU > overlap 的区域
    (含自身) 中取得分最高的 k 个; 5. 关键点、可见性、姿态取逐坐标下中位数,
    性别概率取下中位数后以 0.5 为界, 得分取最大值; 6. 最终框由中位关键点计算。
    得分低于 final_threshold 的结果不输出。
    """
    if k < 1:
        raise PreconditionError(f"top-k 的 k 必须 >= 1: {k}")
    if len(regions) != len(records):
        raise ShapeError(f"landmark_nms: 区域数 {len(regions)} 与预测数 {len(records)} 不一致")

    candidates: List[_Candidate] = []
    for index, (region, record) in enumerate(zip(regions, records)):
        landmarks = denormalize_landmarks(region, record.landmarks)
        if int(landmarks.visible_mask(visibility_threshold).sum()) < 2:
            logger.debug(f"L-NMS: 区域 {index} 可见关键点不足 2 个, 丢弃")
            continue
        precise = landmark_extent_box(landmarks, 1.0, False, visibility_threshold)
        candidates.append(_Candidate(index, float(record.detection), precise, landmarks, record))
    if not candidates:
        return []

    kept = nms([c.precise for c in candidates], [c.score for c in candidates], overlap)
    results: List[DetectionResult] = []
    for position in kept:
        face = candidates[position]
        pool = [c for c in candidates if c is face or iou(c.precise, face.precise) > overlap]
        pool.sort(key=lambda c: (-c.score, c.index))
        top = pool[:k]

        points = lower_median(np.stack([c.landmarks.points for c in top]))
        visibility = lower_median(np.stack([c.landmarks.visibility for c in top]))
        landmarks = LandmarkSet(points, visibility)
        score = max(c.score for c in top)
        if score < final_threshold:
            continue

        pose_deg = None
        if top[0].record.pose is not None:
            pose_deg = lower_median(np.stack([c.record.pose_deg for c in top]))
        gender_prob = gender = None
        if top[0].record.gender_prob is not None:
            gender_prob = float(lower_median(np.array([c.record.gender_prob for c in top])))
            gender = int(gender_prob > 0.5)

        try:
            box = landmark_extent_box(landmarks, pad, square, visibility_threshold)
        except PreconditionError:
            logger.debug("L-NMS: 中位关键点可见数不足, 使用精确框")
            box = Region(face.precise.x, face.precise.y, face.precise.w * pad, face.precise.h * pad)
        results.append(DetectionResult(box, score, landmarks, pose_deg, gender, gender_prob, len(top)))
    return results


def box_nms(regions: Sequence[Region], records: Sequence, overlap: float = 0.3,
            final_threshold: float = 0.5) -> List[DetectionResult]:
    """
    普通 NMS (无关键点输出的检测网络)
    Standard NMS on proposal boxes; kept boxes are returned as-is.
    """
    scores = [float(r.detection) for r in records]
    results = []
    for index in nms(list(regions), scores, overlap):
        if scores[index] < final_threshold:
            continue
        record = records[index]
        results.append(DetectionResult(
            box=regions[index], score=scores[index],
            pose_deg=record.pose_deg,
            gender=record.gender, gender_prob=record.gender_prob))
    return results
