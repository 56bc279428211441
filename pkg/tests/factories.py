# -*- coding: utf-8 -*-
"""测试用的小尺寸配置与标注构造"""

import numpy as np

from core.geometry import LandmarkSet, Region
from core.synth_data import FaceAnnotation, SynthConfig
from models.multitask_net import NetworkSpec
from models.trainer import TrainConfig

DATA_SEED = 3


def tiny_spec(arch: str = 'fused', task=None, n_landmarks: int = 21) -> NetworkSpec:
    return NetworkSpec(arch=arch, task=task, input_size=32, n_landmarks=n_landmarks,
                       trunk_channels=(4, 8, 8), adapter_channels=4, reduce_channels=4,
                       fc_width=16, head_width=8)


def tiny_synth(**overrides) -> SynthConfig:
    values = dict(image_size=64, max_faces=2, face_min=24.0, face_max=40.0, n_train=6, n_test=3)
    values.update(overrides)
    return SynthConfig(**values)


def tiny_train(**overrides) -> TrainConfig:
    values = dict(epochs=2, stage_a_epochs=1, batch_size=8, rois_per_image=4, gt_jitter=2,
                  scales=(24.0, 32.0), precision='float64')
    values.update(overrides)
    return TrainConfig(**values)


def make_face(cx: float = 32.0, cy: float = 32.0, size: float = 20.0, gender: int = 1,
              pose=(0.0, 10.0, -20.0), n_landmarks: int = 21) -> FaceAnnotation:
    """以 (cx, cy) 为中心、关键点均匀分布在框内的人脸标注"""
    rng = np.random.default_rng(int(cx * 31 + cy))
    points = rng.uniform(-0.4, 0.4, (n_landmarks, 2)) * size + [cx, cy]
    return FaceAnnotation(Region(cx, cy, size, size), LandmarkSet(points, np.ones(n_landmarks)),
                          tuple(pose), gender)
