#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
候选区域生成
Region Proposal Providers

网格候选 (多尺度滑窗) 与候选文件 (`image_path cx cy w h`) 两种来源。
"""

import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

from core.errors import DataError, PreconditionError
from core.geometry import Region, iou
from utils.seeding import named_rng

logger = logging.getLogger(__name__)


@dataclass
class ProposalSet:
    """
    一张图像的候选区域集合
    Regions for one image plus a source tag (grid, file, irp-stage-k).
    """
    image_ref: str
    regions: List[Region] = field(default_factory=list)
    source: str = 'grid'

    def __len__(self) -> int:
        return len(self.regions)

    def within(self, width: float, height: float) -> "ProposalSet":
        """丢弃与图像无交集的区域"""
        kept = [r for r in self.regions if r.intersects(width, height)]
        dropped = len(self.regions) - len(kept)
        if dropped:
            logger.warning(f"{self.image_ref}: 丢弃 {dropped} 个位于图像外的候选区域")
        return ProposalSet(self.image_ref, kept, self.source)


def grid_count(extent: float, scale: float, stride: float) -> int:
    """单个尺度在一个方向上的窗口数 floor((W - s)/step) + 1"""
    step = scale * stride
    return int(math.floor((extent - scale) / step + 1e-9)) + 1


def grid_proposals(width: int, height: int, scales: Sequence[float] = (32, 48, 64),
                   stride: float = 0.5, jitter: float = 0.0, seed: int = 0,
                   image_ref: str = '') -> ProposalSet:
    """
    多尺度网格候选
    Square sliding windows of edge ``s`` moved by ``s·stride``; ``jitter``
    shifts every center by a uniform offset of up to ``jitter·step`` pixels.
    Enumeration order: scale, row, column.
    """
    if not stride > 0:
        raise PreconditionError(f"网格步长系数必须为正: {stride}")
    for scale in scales:
        if not 0 < scale <= min(width, height):
            raise PreconditionError(f"尺度 {scale} 超出图像 {width}×{height}")

    rng = named_rng(seed, 'jitter') if jitter > 0 else None
    regions: List[Region] = []
    for scale in scales:
        step = scale * stride
        nx, ny = grid_count(width, scale, stride), grid_count(height, scale, stride)
        for row in range(ny):
            for col in range(nx):
                cx = scale / 2.0 + col * step
                cy = scale / 2.0 + row * step
                if rng is not None:
                    dx, dy = rng.uniform(-jitter * step, jitter * step, 2)
                    cx, cy = cx + float(dx), cy + float(dy)
                regions.append(Region(float(cx), float(cy), float(scale), float(scale)))
    logger.debug(f"网格候选: {len(regions)} 个 (尺度 {list(scales)}, 步长 {stride})")
    return ProposalSet(image_ref, regions, 'grid')


def load_proposal_file(path: str) -> "OrderedDict[str, ProposalSet]":
    """
    读取候选文件
    One region per line: ``image_path cx cy w h``; ``#`` starts a comment.
    Relative image paths are resolved against the file's directory.
    """
    if not os.path.exists(path):
        raise DataError("候选文件不存在", path)
    base = os.path.dirname(os.path.abspath(path))
    sets: "OrderedDict[str, ProposalSet]" = OrderedDict()
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split('#', 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 5:
                raise DataError(f"第 {line_no} 行应有 5 个字段, 实际 {len(parts)}", path)
            try:
                region = Region(*[float(v) for v in parts[1:]])
            except (ValueError, PreconditionError) as e:
                raise DataError(f"第 {line_no} 行数值无效: {e}", path) from e
            image_path = parts[0] if os.path.isabs(parts[0]) else os.path.join(base, parts[0])
            sets.setdefault(image_path, ProposalSet(image_path, [], 'file')).regions.append(region)
    logger.info(f"已读取候选文件 {path}: {len(sets)} 张图像")
    return sets


def proposal_recall(pairs: Iterable[Tuple[Sequence[Region], Sequence[Region]]],
                    iou_threshold: float = 0.5) -> Tuple[float, int]:
    """
    候选召回率
    Fraction of ground-truth boxes covered by at least one region with
    IOU >= ``iou_threshold``; ``pairs`` yields (regions, gt_boxes) per image.
    Returns (recall, n_gt).
    """
    covered = n_gt = 0
    for regions, gt_boxes in pairs:
        for gt in gt_boxes:
            n_gt += 1
            if any(iou(region, gt) >= iou_threshold for region in regions):
                covered += 1
    return (covered / n_gt if n_gt else 0.0), n_gt
