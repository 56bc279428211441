#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
分阶段训练
Staged Training

阶段 A 训练单任务检测网络; 阶段 B 构建目标结构, 用阶段 A 的主干参数初始化,
再以加权多任务损失训练。候选区域由 assign_targets 标注。
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.errors import ConfigError, NonFiniteError
from core.geometry import Region
from core.image_processor import crop_and_resize
from core.optim import sgd_step
from core.proposals import grid_proposals
from core.synth_data import DatasetManifest, DatasetRecord, load_manifest
from models.losses import COMPONENT_KEYS, DEFAULT_LAMBDAS, total_loss
from models.multitask_net import Network, NetworkSpec, build_network
from models.targets import POSITIVE_IOU, TaskTargets, assign_targets, stack_targets
from utils.seeding import named_rng

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ('epoch',) + COMPONENT_KEYS + ('total',)
PRECISIONS = ('float32', 'float64')


@dataclass
class TrainConfig:
    """训练超参数"""
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 8
    stage_a_epochs: int = 2
    batch_size: int = 32
    rois_per_image: int = 16
    lambdas: Tuple[float, ...] = DEFAULT_LAMBDAS
    precision: str = 'float32'
    scales: Tuple[float, ...] = (32, 48, 64)
    stride: float = 0.5
    gt_jitter: int = 4
    jitter_scale: float = 0.2

    def __post_init__(self):
        self.lambdas = tuple(float(w) for w in self.lambdas)
        self.scales = tuple(float(s) for s in self.scales)

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError('train.lr', f"学习率必须为正数, 实际 {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError('train.momentum', f"动量系数必须在 [0, 1) 内, 实际 {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError('train.weight_decay', "权重衰减不能为负")
        if self.epochs < 1 or self.stage_a_epochs < 0:
            raise ConfigError('train.epochs', f"训练轮数无效: {self.epochs}/{self.stage_a_epochs}")
        if self.batch_size < 1:
            raise ConfigError('train.batch_size', "批大小必须 >= 1")
        if self.rois_per_image < 2:
            raise ConfigError('train.rois_per_image', "每张图像至少采样 2 个区域")
        if len(self.lambdas) != 5 or any(w < 0 for w in self.lambdas):
            raise ConfigError('train.lambdas', f"λ 必须为 5 个非负数, 实际 {self.lambdas}")
        if self.precision not in PRECISIONS:
            raise ConfigError('train.precision', f"可选 {PRECISIONS}, 实际 {self.precision!r}")
        if self.gt_jitter < 0 or not 0 <= self.jitter_scale < 1:
            raise ConfigError('train.gt_jitter', "真值框扰动参数无效")
        return self

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)


@dataclass
class RoiPool:
    """一张训练图像的候选区域及其训练目标"""
    image_index: int
    regions: List[Region]
    targets: List[TaskTargets]

    def positive_indices(self) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.targets) if t.max_iou > POSITIVE_IOU], dtype=np.int64)

    def other_indices(self) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.targets) if t.max_iou <= POSITIVE_IOU], dtype=np.int64)


@dataclass
class TrainResult:
    network: Network
    history: pd.DataFrame
    checkpoint_path: str
    stage_a: Network
    stage_a_history: Optional[pd.DataFrame] = None
    extra: Dict = field(default_factory=dict)


def jitter_boxes(box: Region, count: int, scale: float, rng: np.random.Generator) -> List[Region]:
    """在真值框附近随机平移和缩放, 生成额外的正样本候选"""
    boxes = []
    for _ in range(count):
        dx, dy = rng.uniform(-scale, scale, size=2)
        factor = float(np.exp(rng.uniform(-scale, scale)))
        boxes.append(Region(box.x + dx * box.w, box.y + dy * box.h, box.w * factor, box.h * factor))
    return boxes


def build_roi_pools(records: Sequence[DatasetRecord], config: TrainConfig, seed: int,
                    n_landmarks: int, positive_only_tasks: bool, image_size: int) -> List[RoiPool]:
    """
    为每张训练图像准备候选区域
    Grid proposals, the ground-truth boxes and jittered copies, each labeled
    against the image's annotations.
    """
    scales = [s for s in config.scales if s <= image_size]
    pools = []
    for index, record in enumerate(records):
        regions = list(grid_proposals(image_size, image_size, scales, config.stride).regions)
        rng = named_rng(seed, 'jitter', index)
        for face in record.faces:
            regions.append(face.box)
            regions.extend(jitter_boxes(face.box, config.gt_jitter, config.jitter_scale, rng))
        targets = [assign_targets(r, record.faces, n_landmarks, positive_only_tasks) for r in regions]
        pools.append(RoiPool(index, regions, targets))
    return pools


def sample_epoch(pools: Sequence[RoiPool], rois_per_image: int, seed: int,
                 stage: int, epoch: int) -> List[Tuple[int, int]]:
    """
    按轮采样 (图像下标, 区域下标)
    Up to half of each image's quota comes from regions with IOU > 0.5; the
    sample is then shuffled. Depends only on IOU values, not on the network.
    """
    rng = named_rng(seed, 'sample', stage, epoch)
    chosen: List[Tuple[int, int]] = []
    for pool in pools:
        positives, others = pool.positive_indices(), pool.other_indices()
        n_pos = min(len(positives), rois_per_image // 2)
        n_other = min(len(others), rois_per_image - n_pos)
        picked = []
        if n_pos:
            picked.extend(rng.choice(positives, size=n_pos, replace=False).tolist())
        if n_other:
            picked.extend(rng.choice(others, size=n_other, replace=False).tolist())
        chosen.extend((pool.image_index, int(i)) for i in picked)
    order = named_rng(seed, 'shuffle', stage, epoch).permutation(len(chosen))
    return [chosen[i] for i in order]


def _split_path(checkpoint_path: str) -> str:
    base, _ = os.path.splitext(checkpoint_path)
    return base


def write_loss_log(history: pd.DataFrame, path: str) -> str:
    """写出损失日志 CSV (epoch,loss_D,loss_L,loss_V,loss_P,loss_G,total)"""
    history.loc[:, list(LOSS_COLUMNS)].to_csv(path, index=False, lineterminator='\n', float_format='%.10g')
    return path


def run_stage(network: Network, pools: Sequence[RoiPool], images: Sequence[np.ndarray],
              config: TrainConfig, lambdas: Sequence[float], epochs: int, seed: int, stage: int,
              checkpoint_path: str, meta: Dict, progress: bool = True) -> pd.DataFrame:
    """
    单阶段训练循环
    Each epoch samples ROIs, crops them on the fly and runs SGD; the
    checkpoint is written before the first epoch and rewritten atomically
    after every epoch, so a non-finite failure leaves the last good one on disk.
    """
    dtype = network.dtype
    edge = network.spec.input_size
    params = network.parameters()
    network.save(checkpoint_path, meta=dict(meta, epoch=0))
    rows = []
    for epoch in range(1, epochs + 1):
        samples = sample_epoch(pools, config.rois_per_image, seed, stage, epoch)
        sums = dict.fromkeys(COMPONENT_KEYS + ('total',), 0.0)
        n_batches = 0
        batches = range(0, len(samples), config.batch_size)
        bar = tqdm(batches, desc=f"{network.spec.name} 第 {epoch}/{epochs} 轮", disable=not progress, leave=False)
        for start in bar:
            chunk = samples[start:start + config.batch_size]
            crops = np.stack([crop_and_resize(images[i].astype(np.float64) / 255.0, pools[i].regions[j], edge)
                              for i, j in chunk]).astype(dtype)
            targets = stack_targets([pools[i].targets[j] for i, j in chunk], dtype)
            loss, components = total_loss(network.forward(crops), targets, lambdas)
            if not np.isfinite(components['total']):
                logger.error(f"第 {epoch} 轮出现非有限损失, 保留上一个检查点 {checkpoint_path}")
                raise NonFiniteError(f"{network.spec.name} 第 {epoch} 轮损失非有限: {components}")
            loss.backward()
            sgd_step(params, config.lr, config.momentum, config.weight_decay)
            for key, value in components.items():
                sums[key] += value
            n_batches += 1
            bar.set_postfix(loss=f"{components['total']:.4f}")
        row = {'epoch': epoch}
        row.update({key: value / max(n_batches, 1) for key, value in sums.items()})
        rows.append(row)
        network.save(checkpoint_path, meta=dict(meta, epoch=epoch))
        logger.info(f"{network.spec.name} 第 {epoch} 轮: total={row['total']:.5f} "
                    f"(D={row['loss_D']:.4f}, L={row['loss_L']:.5f}, V={row['loss_V']:.4f}, "
                    f"P={row['loss_P']:.4f}, G={row['loss_G']:.4f})")
    return pd.DataFrame(rows, columns=list(LOSS_COLUMNS))


def load_training_images(records: Sequence[DatasetRecord], progress: bool = True) -> List[np.ndarray]:
    """读取训练图像并以 uint8 保存 (合成图像本身已量化到 8 位)"""
    images = []
    for record in tqdm(records, desc="读取训练图像", disable=not progress, leave=False):
        images.append(np.round(record.load_image() * 255.0).astype(np.uint8))
    return images


def train(manifest, spec: NetworkSpec, config: Optional[TrainConfig] = None, seed: int = 0,
          checkpoint_path: str = 'model.mfk', stage_a: Optional[Network] = None,
          progress: bool = True, split: str = 'train') -> TrainResult:
    """
    训练指定结构的网络
    Train ``spec`` with staged initialization.

    Args:
        manifest: 数据集清单或其路径
        spec: 目标网络结构
        config: 训练超参数
        seed: 随机种子 (初始化、采样、扰动)
        checkpoint_path: 阶段 B 检查点路径; 阶段 A 写到 <base>.stageA.mfk
        stage_a: 已训练的阶段 A 网络 (消融实验中共享)

    Returns:
        TrainResult
    """
    config = (config or TrainConfig()).validate()
    spec.validate()
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    records = manifest.records(split)
    if not records:
        raise ConfigError('synth.n_train', "训练集为空")
    image_size = int(manifest.config.get('image_size', 128))
    n_landmarks = spec.n_landmarks
    if n_landmarks != manifest.n_landmarks:
        raise ConfigError('network.n_landmarks',
                          f"网络关键点数 {n_landmarks} 与数据集 {manifest.n_landmarks} 不一致")

    base = _split_path(checkpoint_path)
    images = load_training_images(records, progress)
    meta = {'seed': int(seed), 'train': _config_doc(config), 'data_config_hash': manifest.config_hash}
    logger.info(f"开始训练 {spec.name}: {len(records)} 张图像, 精度 {config.precision}, 种子 {seed}")

    stage_a_history = None
    if stage_a is None:
        detector_spec = spec.variant('single-task', 'detection')
        stage_a = build_network(detector_spec, seed, config.dtype)
        pools_a = build_roi_pools(records, config, seed, n_landmarks, False, image_size)
        stage_a_history = run_stage(stage_a, pools_a, images, config, config.lambdas, config.stage_a_epochs,
                                    seed, 0, f"{base}.stageA.mfk", dict(meta, stage='A'), progress)
        if config.stage_a_epochs:
            write_loss_log(stage_a_history, f"{base}.stageA.csv")

    network = build_network(spec, seed, config.dtype)
    network.copy_trunk_from(stage_a)
    positive_only = spec.arch == 'single-task' and spec.task != 'detection'
    pools = build_roi_pools(records, config, seed, n_landmarks, positive_only, image_size)
    history = run_stage(network, pools, images, config, config.lambdas, config.epochs, seed, 1,
                        checkpoint_path, dict(meta, stage='B'), progress)
    write_loss_log(history, f"{base}.loss.csv")

    first, last = history['total'].iloc[0], history['total'].iloc[-1]
    logger.info(f"{spec.name} 训练完成: total {first:.5f} -> {last:.5f}, 检查点 {checkpoint_path}")
    return TrainResult(network, history, checkpoint_path, stage_a, stage_a_history)


def _config_doc(config: TrainConfig) -> Dict:
    doc = asdict(config)
    doc['lambdas'] = list(doc['lambdas'])
    doc['scales'] = list(doc['scales'])
    return doc
