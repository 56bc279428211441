#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
多任务人脸网络
Multi-Task Face Network

三种结构:
    fused        主干多层特征经步长匹配的卷积适配后拼接, 1×1 卷积降维, 共享全连接, 五个任务分支
    shared-trunk 只使用主干最后一层特征, 其余与 fused 相同
    single-task  主干 + 单个任务分支 (detection / fiducial / pose / gender)
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from core.checkpoint import load_checkpoint, save_checkpoint
from core.errors import ConfigError, ShapeError
from core.geometry import NormalizedLandmarkSet
from core.tensor import (Parameter, Tensor, concat_channels, conv2d, flatten, linear,
                         maxpool2d, relu, softmax2)
from models.losses import HeadOutputs
from models.targets import POSE_SCALE
from utils.seeding import named_rng, stream_id

logger = logging.getLogger(__name__)

ARCHITECTURES = ('fused', 'shared-trunk', 'single-task')
SINGLE_TASKS = ('detection', 'fiducial', 'pose', 'gender')
# 任务 -> 输出头
TASK_HEADS = {
    'detection': ('detection',),
    'fiducial': ('landmarks', 'visibility'),
    'pose': ('pose',),
    'gender': ('gender',),
}
ALL_HEADS = ('detection', 'landmarks', 'visibility', 'pose', 'gender')


@dataclass
class NetworkSpec:
    """
    网络结构描述
    Declarative layer graph; every field is config-overridable and echoed into
    checkpoints.
    """
    arch: str = 'fused'
    task: Optional[str] = None
    input_size: int = 64
    n_landmarks: int = 21
    trunk_channels: Tuple[int, ...] = (16, 32, 64)
    trunk_kernels: Tuple[int, ...] = (5, 3, 3)
    trunk_strides: Tuple[int, ...] = (2, 1, 1)
    pool: int = 2
    taps: Tuple[int, ...] = (1, 2, 3)
    adapter_channels: int = 64
    reduce_channels: int = 48
    fc_width: int = 512
    head_width: int = 128

    def __post_init__(self):
        self.trunk_channels = tuple(int(v) for v in self.trunk_channels)
        self.trunk_kernels = tuple(int(v) for v in self.trunk_kernels)
        self.trunk_strides = tuple(int(v) for v in self.trunk_strides)
        self.taps = tuple(int(v) for v in self.taps)

    @property
    def heads(self) -> Tuple[str, ...]:
        if self.arch == 'single-task':
            return TASK_HEADS[self.task]
        return ALL_HEADS

    @property
    def name(self) -> str:
        return f"single-task-{self.task}" if self.arch == 'single-task' else self.arch

    def head_width_of(self, head: str) -> int:
        return {'detection': 2, 'landmarks': 2 * self.n_landmarks, 'visibility': self.n_landmarks,
                'pose': 3, 'gender': 2}[head]

    def validate(self) -> "NetworkSpec":
        """校验结构并做符号形状传播"""
        if self.arch not in ARCHITECTURES:
            raise ConfigError('network.arch', f"未知结构 {self.arch!r}, 可选 {ARCHITECTURES}")
        if self.arch == 'single-task' and self.task not in SINGLE_TASKS:
            raise ConfigError('network.task', f"单任务网络需要指定任务 {SINGLE_TASKS}, 实际 {self.task!r}")
        if not (len(self.trunk_channels) == len(self.trunk_kernels) == len(self.trunk_strides) >= 1):
            raise ConfigError('network.trunk_channels', "主干各层通道、核大小、步长的数量必须一致")
        if self.arch == 'fused':
            if len(self.taps) < 2 or len(set(self.taps)) != len(self.taps):
                raise ConfigError('network.taps', f"融合结构需要至少 2 个深度不同的抽头, 实际 {self.taps}")
            if not all(1 <= t <= len(self.trunk_channels) for t in self.taps):
                raise ConfigError('network.taps', f"抽头 {self.taps} 超出主干层数 {len(self.trunk_channels)}")
        if self.n_landmarks < 2:
            raise ConfigError('network.n_landmarks', "关键点数必须 >= 2")
        self.layer_shapes()
        return self

    def layer_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        """
        符号形状传播
        Returns layer name -> output shape; raises ShapeError naming the first
        inconsistent layer.
        """
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        channels, height, width = 3, self.input_size, self.input_size
        stage_shapes: List[Tuple[int, int, int]] = []
        for index, (out_ch, kernel, stride) in enumerate(
                zip(self.trunk_channels, self.trunk_kernels, self.trunk_strides), start=1):
            pad = kernel // 2
            if height + 2 * pad < kernel or stride < 1 or out_ch < 1:
                raise ShapeError(f"conv{index}: 输入 {channels}×{height}×{width} 无法应用 {kernel}×{kernel}/{stride} 卷积")
            height = (height + 2 * pad - kernel) // stride + 1
            width = (width + 2 * pad - kernel) // stride + 1
            channels = out_ch
            shapes[f'conv{index}'] = (channels, height, width)
            if self.pool > height or self.pool > width:
                raise ShapeError(f"pool{index}: 池化窗口 {self.pool} 大于特征图 {height}×{width}")
            height = (height - self.pool) // self.pool + 1
            width = (width - self.pool) // self.pool + 1
            shapes[f'pool{index}'] = (channels, height, width)
            stage_shapes.append((channels, height, width))

        if self.arch == 'fused':
            taps = sorted(self.taps)
            deep_c, deep_h, deep_w = stage_shapes[taps[-1] - 1]
            concat_c = deep_c
            for tap in taps[:-1]:
                tap_c, tap_h, tap_w = stage_shapes[tap - 1]
                if tap_h % deep_h or tap_w % deep_w or tap_h // deep_h != tap_w // deep_w:
                    raise ShapeError(
                        f"adapt{tap}: 抽头特征 {tap_h}×{tap_w} 无法以整数步长对齐到 {deep_h}×{deep_w}")
                shapes[f'adapt{tap}'] = (self.adapter_channels, deep_h, deep_w)
                concat_c += self.adapter_channels
            shapes['concat'] = (concat_c, deep_h, deep_w)
            shapes['reduce'] = (self.reduce_channels, deep_h, deep_w)
            flat = self.reduce_channels * deep_h * deep_w
        else:
            last_c, last_h, last_w = stage_shapes[-1]
            flat = last_c * last_h * last_w
        shapes['flatten'] = (flat,)
        shapes['fc_shared'] = (self.fc_width,)
        for head in self.heads:
            shapes[f'fc_{head}'] = (self.head_width,)
            shapes[f'head_{head}'] = (self.head_width_of(head),)
        return shapes

    def adapter_stride(self, tap: int) -> int:
        shapes = self.layer_shapes()
        return shapes[f'pool{tap}'][1] // shapes['concat'][1]

    def to_dict(self) -> Dict:
        doc = asdict(self)
        for key in ('trunk_channels', 'trunk_kernels', 'trunk_strides', 'taps'):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NetworkSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "网络结构描述中的未知字段")
        return cls(**dict(doc))

    def variant(self, arch: str, task: Optional[str] = None) -> "NetworkSpec":
        doc = self.to_dict()
        doc.update(arch=arch, task=task)
        return NetworkSpec.from_dict(doc)


@dataclass
class PredictionRecord:
    """
    单个区域的网络输出
    Detection probability, normalized landmarks + clamped visibility,
    pose in degrees/90 and female probability. Heads a network lacks are None.
    """
    detection: float
    landmarks: Optional[NormalizedLandmarkSet] = None
    pose: Optional[np.ndarray] = None
    gender_prob: Optional[float] = None

    @property
    def pose_deg(self) -> Optional[np.ndarray]:
        return None if self.pose is None else self.pose * POSE_SCALE

    @property
    def gender(self) -> Optional[int]:
        """女性概率最大则为 1"""
        return None if self.gender_prob is None else int(self.gender_prob > 0.5)


class Network:
    """
    参数化的网络实例
    Parameters + forward graph construction. A single instance is owned by one
    thread during forward/backward; untracked forwards only read parameters.
    """

    def __init__(self, spec: NetworkSpec, params: "OrderedDict[str, Parameter]"):
        self.spec = spec
        self.params = params

    # ------------------------------------------------------------------
    @property
    def heads(self) -> Tuple[str, ...]:
        return self.spec.heads

    @property
    def has_landmarks(self) -> bool:
        return 'landmarks' in self.heads

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def trunk_names(self) -> List[str]:
        return [name for name in self.params if name.startswith('conv')]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ShapeError(f"参数块不一致: 缺少 {missing[:3]}, 多余 {extra[:3]}")
        for name, array in arrays.items():
            if name not in self.params:
                continue
            param = self.params[name]
            if tuple(array.shape) != param.shape:
                raise ShapeError(f"参数块 {name}: 形状 {tuple(array.shape)} 与网络 {param.shape} 不一致")
            param.data = np.array(array, dtype=param.dtype)
            param.zero_grad()
            param.momentum = np.zeros_like(param.data)

    def copy_trunk_from(self, other: "Network") -> None:
        """用另一网络的主干参数初始化本网络 (分阶段训练)"""
        self.load_state_dict(OrderedDict((name, other.params[name].data) for name in self.trunk_names()),
                             strict=False)
        logger.info(f"已从 {other.spec.name} 复制主干参数 ({len(self.trunk_names())} 个参数块)")

    def astype(self, dtype) -> "Network":
        params = OrderedDict((name, Parameter(p.data.astype(dtype), name=name)) for name, p in self.params.items())
        return Network(self.spec, params)

    # ------------------------------------------------------------------
    def forward(self, batch, track: bool = True) -> HeadOutputs:
        """
        前向计算
        Args:
            batch: N×3×E×E 图像块 (取值 [0, 1])
            track: False 时不记录参数梯度 (只读推理)
        """
        spec = self.spec
        if track:
            weights: Mapping[str, Tensor] = self.params
        else:
            weights = {name: Tensor(p.data) for name, p in self.params.items()}
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if data.ndim != 4 or data.shape[1:] != (3, spec.input_size, spec.input_size):
            raise ShapeError(f"网络输入应为 N×3×{spec.input_size}×{spec.input_size}, 实际 {data.shape}")
        x = Tensor(data.astype(self.dtype, copy=False) - 0.5)

        taps: Dict[int, Tensor] = {}
        for index, (kernel, stride) in enumerate(zip(spec.trunk_kernels, spec.trunk_strides), start=1):
            x = conv2d(x, weights[f'conv{index}.weight'], weights[f'conv{index}.bias'],
                       stride=stride, pad=kernel // 2)
            x = maxpool2d(relu(x), spec.pool, spec.pool)
            taps[index] = x

        if spec.arch == 'fused':
            ordered = sorted(spec.taps)
            fused = []
            for tap in ordered[:-1]:
                stride = taps[tap].shape[-1] // taps[ordered[-1]].shape[-1]
                fused.append(relu(conv2d(taps[tap], weights[f'adapt{tap}.weight'], weights[f'adapt{tap}.bias'],
                                         stride=stride)))
            fused.append(taps[ordered[-1]])
            x = relu(conv2d(concat_channels(fused), weights['reduce.weight'], weights['reduce.bias']))

        shared = relu(linear(flatten(x), weights['fc_shared.weight'], weights['fc_shared.bias']))
        outputs: Dict[str, Tensor] = {}
        for head in spec.heads:
            hidden = relu(linear(shared, weights[f'fc_{head}.weight'], weights[f'fc_{head}.bias']))
            out = linear(hidden, weights[f'head_{head}.weight'], weights[f'head_{head}.bias'])
            if head in ('detection', 'gender'):
                outputs[f'{head}_logits'] = out
                out = softmax2(out)
            outputs[head] = out
        return HeadOutputs(**outputs)

    def predict(self, batch) -> List[PredictionRecord]:
        """批量推理, 返回每个图像块的 PredictionRecord"""
        outputs = self.forward(batch, track=False)
        return records_from_outputs(outputs, self.spec.n_landmarks)

    def save(self, path: str, meta: Optional[Dict] = None) -> str:
        return save_checkpoint(path, self.params, spec=self.spec.to_dict(), meta=meta)

    def __repr__(self) -> str:
        total = sum(p.size for p in self.params.values())
        return f"Network({self.spec.name}, {len(self.params)} 个参数块, {total} 个参数)"


def records_from_outputs(outputs: HeadOutputs, n_landmarks: int) -> List[PredictionRecord]:
    """HeadOutputs -> PredictionRecord 列表 (可见性截断到 [0, 1])"""
    reference = next(t for t in (outputs.detection, outputs.landmarks, outputs.pose, outputs.gender)
                     if t is not None)
    count = reference.shape[0]
    records = []
    for i in range(count):
        detection = float(outputs.detection.data[i, 1]) if outputs.detection is not None else 0.0
        landmarks = None
        if outputs.landmarks is not None:
            coords = outputs.landmarks.data[i].astype(np.float64).reshape(n_landmarks, 2)
            visibility = np.clip(outputs.visibility.data[i].astype(np.float64), 0.0, 1.0)
            landmarks = NormalizedLandmarkSet(coords, visibility)
        pose = outputs.pose.data[i].astype(np.float64).copy() if outputs.pose is not None else None
        gender = float(outputs.gender.data[i, 1]) if outputs.gender is not None else None
        records.append(PredictionRecord(detection, landmarks, pose, gender))
    return records


def _init_layer(seed: int, name: str, shape: Tuple[int, ...], fan_in: int, gain: float, dtype) -> np.ndarray:
    rng = named_rng(seed, 'init', stream_id(name))
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Network:
    """
    构建网络
    He-scaled normal init from a per-layer random stream keyed by layer name, so
    equally named layers initialize identically across architectures; biases
    start at zero.
    """
    spec.validate()
    shapes = spec.layer_shapes()
    params: "OrderedDict[str, Parameter]" = OrderedDict()

    def conv(name: str, c_out: int, c_in: int, kernel: int):
        fan_in = c_in * kernel * kernel
        params[f'{name}.weight'] = Parameter(_init_layer(seed, name, (c_out, c_in, kernel, kernel), fan_in, 2.0, dtype),
                                             name=f'{name}.weight')
        params[f'{name}.bias'] = Parameter(np.zeros(c_out, dtype=dtype), name=f'{name}.bias')

    def dense(name: str, n_out: int, n_in: int, gain: float = 2.0):
        params[f'{name}.weight'] = Parameter(_init_layer(seed, name, (n_out, n_in), n_in, gain, dtype),
                                             name=f'{name}.weight')
        params[f'{name}.bias'] = Parameter(np.zeros(n_out, dtype=dtype), name=f'{name}.bias')

    c_in = 3
    for index, (c_out, kernel) in enumerate(zip(spec.trunk_channels, spec.trunk_kernels), start=1):
        conv(f'conv{index}', c_out, c_in, kernel)
        c_in = c_out
    if spec.arch == 'fused':
        for tap in sorted(spec.taps)[:-1]:
            stride = spec.adapter_stride(tap)
            conv(f'adapt{tap}', spec.adapter_channels, spec.trunk_channels[tap - 1], stride)
        conv('reduce', spec.reduce_channels, shapes['concat'][0], 1)
    dense('fc_shared', spec.fc_width, shapes['flatten'][0])
    for head in spec.heads:
        dense(f'fc_{head}', spec.head_width, spec.fc_width)
        dense(f'head_{head}', spec.head_width_of(head), spec.head_width, gain=1.0)

    network = Network(spec, params)
    logger.info(f"网络已构建: {network}")
    return network


def load_network(path: str, dtype=None) -> Network:
    """从检查点恢复网络"""
    manifest, arrays = load_checkpoint(path)
    spec = NetworkSpec.from_dict(manifest.get('spec', {}))
    first = next(iter(arrays.values()))
    network = build_network(spec, seed=0, dtype=dtype or first.dtype)
    network.load_state_dict(arrays)
    return network


def network_meta(path: str) -> Dict:
    """检查点中的训练元数据"""
    manifest, _ = load_checkpoint(path)
    return manifest.get('meta', {})
