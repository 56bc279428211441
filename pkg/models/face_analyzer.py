#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
人脸分析器: 区域推理与完整检测流程
Face Analyzer

候选区域 -> 迭代候选区域 (IRP) -> 基于关键点的 NMS (L-NMS)。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import PreconditionError
from core.geometry import DEFAULT_FACE_PAD, Region
from core.image_processor import FaceImageProcessor, crop_batch
from core.postprocess import (CachedScorer, DetectionResult, box_nms,
                              iterative_region_proposals, landmark_nms)
from core.proposals import ProposalSet, grid_proposals
from models.multitask_net import Network, PredictionRecord, load_network

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """检测流程参数"""
    scales: Tuple[float, ...] = (32, 48, 64)
    stride: float = 0.5
    jitter: float = 0.0
    irp_steps: int = 1
    candidate_threshold: float = 0.25
    final_threshold: float = 0.5
    visibility_threshold: float = 0.5
    nms_overlap: float = 0.3
    top_k: int = 5
    face_pad: float = DEFAULT_FACE_PAD
    square_face_boxes: bool = True
    batch_size: int = 64

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)


def infer_regions(network: Network, image: np.ndarray, regions: Sequence[Region],
                  batch_size: int = 64, threads: int = 1) -> List[PredictionRecord]:
    """
    批量区域推理
    Crop, resize and score regions in fixed-size chunks; chunks may run on
    separate threads and are merged in input order.
    """
    regions = list(regions)
    if not regions:
        return []
    edge = network.spec.input_size
    chunks = [regions[i:i + batch_size] for i in range(0, len(regions), batch_size)]

    def score(chunk: List[Region]) -> List[PredictionRecord]:
        return network.predict(crop_batch(image, chunk, edge))

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(score, chunks))
    else:
        parts = [score(chunk) for chunk in chunks]
    return [record for part in parts for record in part]


def infer_region(network: Network, image: np.ndarray, region: Region) -> PredictionRecord:
    """单区域推理; 关键点输出位于区域归一化坐标系"""
    return infer_regions(network, image, [region], batch_size=1)[0]


def detect(network: Network, image: np.ndarray, config: Optional[PipelineConfig] = None,
           proposals: Optional[ProposalSet] = None, seed: int = 0,
           threads: int = 1) -> List[DetectionResult]:
    """
    完整检测流程
    Grid (or supplied) proposals -> IRP -> L-NMS. Networks without a landmark
    head fall back to plain NMS on the proposal boxes.
    """
    config = config or PipelineConfig()
    if 'detection' not in network.heads:
        raise PreconditionError(f"网络 {network.spec.name} 没有检测输出, 无法执行检测")
    _, height, width = image.shape
    if proposals is None:
        proposals = grid_proposals(width, height, config.scales, config.stride,
                                   config.jitter, seed)
    proposals = proposals.within(width, height)
    scorer = CachedScorer(lambda regions: infer_regions(network, image, regions,
                                                        config.batch_size, threads))

    if not network.has_landmarks:
        records = scorer(proposals.regions)
        return box_nms(proposals.regions, records, config.nms_overlap, config.final_threshold)

    accumulated, _, records = iterative_region_proposals(
        scorer, proposals, config.irp_steps, config.candidate_threshold,
        config.face_pad, config.square_face_boxes, config.visibility_threshold,
        image_size=(width, height))
    results = landmark_nms(accumulated.regions, records, config.nms_overlap, config.top_k,
                           config.final_threshold, config.visibility_threshold,
                           config.face_pad, config.square_face_boxes)
    logger.debug(f"{proposals.image_ref}: {len(proposals)} 个候选, IRP 后 {len(accumulated)} 个, 输出 {len(results)} 张人脸")
    return results


class FaceAnalyzer:
    """人脸分析器"""

    def __init__(self, network: Optional[Network] = None,
                 config: Optional[PipelineConfig] = None, threads: int = 1):
        """初始化分析器"""
        self.network = network
        self.config = config or PipelineConfig()
        self.threads = threads
        self.processor = FaceImageProcessor()
        self.last_analysis_result: Optional[Dict] = None

    @property
    def is_loaded(self) -> bool:
        return self.network is not None

    def load_model(self, checkpoint_path: str) -> Network:
        """加载检查点"""
        try:
            self.network = load_network(checkpoint_path)
        except Exception as e:
            logger.error(f"加载模型失败: {str(e)}")
            raise
        logger.info(f"成功加载模型: {checkpoint_path} ({self.network.spec.name})")
        return self.network

    def _require_model(self) -> Network:
        if self.network is None:
            raise PreconditionError("尚未加载模型")
        return self.network

    def infer_region(self, image: np.ndarray, region: Region) -> PredictionRecord:
        return infer_region(self._require_model(), image, region)

    def infer_regions(self, image: np.ndarray, regions: Sequence[Region]) -> List[PredictionRecord]:
        return infer_regions(self._require_model(), image, regions, self.config.batch_size, self.threads)

    def detect(self, image: np.ndarray, proposals: Optional[ProposalSet] = None,
               seed: int = 0) -> List[DetectionResult]:
        return detect(self._require_model(), image, self.config, proposals, seed, self.threads)

    def analyze_image(self, image_path: str, proposals: Optional[ProposalSet] = None,
                      seed: int = 0) -> Dict:
        """
        综合分析一张图像
        Load, detect and summarize one image.
        """
        image = self.processor.load_image(image_path)
        if proposals is not None:
            proposals = ProposalSet(image_path, proposals.regions, proposals.source)
        detections = self.detect(image, proposals, seed)
        result = {
            'image': image_path,
            'image_shape': list(image.shape),
            'detections': detections,
            'face_count': len(detections),
            'gender_counts': {
                'male': sum(1 for d in detections if d.gender == 0),
                'female': sum(1 for d in detections if d.gender == 1),
            },
        }
        self.last_analysis_result = result
        logger.info(f"{image_path}: 检测到 {len(detections)} 张人脸")
        return result

    def get_model_info(self) -> Dict:
        """获取模型信息"""
        if self.network is None:
            return {'loaded': False}
        return {
            'loaded': True,
            'architecture': self.network.spec.name,
            'heads': list(self.network.heads),
            'parameter_blocks': len(self.network.params),
            'parameters': int(sum(p.size for p in self.network.parameters())),
            'precision': str(self.network.dtype),
        }
