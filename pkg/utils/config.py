#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运行配置
Run Configuration

配置文件为扁平的 `section.key = value` 文本, `#` 开头为注释, 值按 Python 字面量解析
(解析失败时视为字符串)。未知键与类型不符一律拒绝。
"""

import ast
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Tuple

from core.errors import ConfigError
from core.synth_data import SynthConfig
from models.face_analyzer import PipelineConfig
from models.multitask_net import NetworkSpec
from models.network_check import GradCheckConfig
from models.trainer import TrainConfig
from utils.metrics import EvalConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    'synth': SynthConfig,
    'network': NetworkSpec,
    'train': TrainConfig,
    'pipeline': PipelineConfig,
    'eval': EvalConfig,
    'gradcheck': GradCheckConfig,
}
TOP_LEVEL = ('seed', 'threads')
# 默认值为 None 但允许字符串的键
OPTIONAL_STR = {'network.task'}

DESCRIPTIONS = {
    'seed': "全局随机种子 (synth/init/shuffle/sample/jitter/gradcheck 子流均由此派生)",
    'threads': "工作线程数上限",
    'synth.image_size': "合成图像边长 (像素, >= 64)",
    'synth.max_faces': "每张图像最多人脸数 (0-3)",
    'synth.face_min': "人脸尺度下限 (像素)",
    'synth.face_max': "人脸尺度上限 (像素)",
    'synth.pose_limit': "姿态角范围 ±度 (<= 60)",
    'synth.n_landmarks': "关键点数 (2-21)",
    'synth.noise_sigma': "像素噪声标准差",
    'synth.max_distractors': "每张图像最多干扰图形数",
    'synth.n_train': "训练样本数",
    'synth.n_test': "测试样本数",
    'network.arch': "结构: fused / shared-trunk / single-task",
    'network.task': "单任务网络的任务: detection / fiducial / pose / gender",
    'network.input_size': "网络输入边长 (像素)",
    'network.n_landmarks': "关键点数 (需与数据集一致)",
    'network.trunk_channels': "主干各层输出通道数",
    'network.trunk_kernels': "主干各层卷积核大小",
    'network.trunk_strides': "主干各层卷积步长",
    'network.pool': "主干池化窗口与步长",
    'network.taps': "融合结构的抽头层 (1 起)",
    'network.adapter_channels': "抽头适配卷积输出通道数",
    'network.reduce_channels': "1×1 降维卷积输出通道数",
    'network.fc_width': "共享全连接层宽度",
    'network.head_width': "各任务分支隐藏层宽度",
    'train.lr': "学习率",
    'train.momentum': "动量系数",
    'train.weight_decay': "权重衰减",
    'train.epochs': "阶段 B 训练轮数",
    'train.stage_a_epochs': "阶段 A (单任务检测) 训练轮数",
    'train.batch_size': "批大小 (区域数)",
    'train.rois_per_image': "每张图像每轮采样的区域数",
    'train.lambdas': "损失权重 (检测, 关键点, 可见性, 姿态, 性别)",
    'train.precision': "训练精度: float32 / float64",
    'train.scales': "训练候选网格尺度",
    'train.stride': "训练候选网格步长系数",
    'train.gt_jitter': "每个真值框的随机扰动框数",
    'train.jitter_scale': "真值框扰动幅度 (相对框边长)",
    'pipeline.scales': "检测候选网格尺度",
    'pipeline.stride': "检测候选网格步长系数",
    'pipeline.jitter': "候选中心随机偏移 (相对步长)",
    'pipeline.irp_steps': "迭代候选区域轮数 T",
    'pipeline.candidate_threshold': "IRP 候选阈值",
    'pipeline.final_threshold': "最终检测阈值",
    'pipeline.visibility_threshold': "关键点可见性阈值",
    'pipeline.nms_overlap': "NMS 重叠阈值",
    'pipeline.top_k': "L-NMS 每个人脸聚合的区域数 k",
    'pipeline.face_pad': "人脸框相对关键点外接框的放大系数",
    'pipeline.square_face_boxes': "人脸框扩展为正方形",
    'pipeline.batch_size': "推理批大小",
    'eval.iou_threshold': "检测匹配 IOU 阈值",
    'eval.normalizer': "NME 归一化: face_size / interocular",
    'eval.normalizer_indices': "interocular 归一化使用的两个关键点 (完整 21 点模板下标)",
    'eval.ced_max': "NME CED 网格上限 (%)",
    'eval.ced_steps': "NME CED 网格点数",
    'eval.pose_tolerance': "姿态容差 (度)",
    'eval.pose_ced_max': "姿态 CED 网格上限 (度)",
    'eval.pose_ced_steps': "姿态 CED 网格点数",
    'eval.visibility_threshold': "检测结果中关键点可见的阈值",
    'gradcheck.seeds': "随机种子数",
    'gradcheck.step': "中心差分步长",
    'gradcheck.tolerance': "最大相对误差阈值",
    'gradcheck.entries_per_block': "整网检验时每个参数块抽查的元素数",
    'gradcheck.batch': "整网检验的批大小",
    'gradcheck.operators': "同时逐算子检验",
}


def parse_value(text: str):
    """字面量解析; true/false/none 不区分大小写, 无法解析时返回原字符串"""
    text = text.strip()
    lowered = text.lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if lowered in ('none', 'null'):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, value, default):
    """按默认值的类型检查并转换"""
    if key in OPTIONAL_STR:
        if value is None or isinstance(value, str):
            return value
        raise ConfigError(key, f"应为字符串或 none, 实际 {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = (value,)
        if isinstance(value, (list, tuple)) and all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            kind = type(default[0]) if default else float
            if kind is int and not all(float(v).is_integer() for v in value):
                raise ConfigError(key, f"应为整数序列, 实际 {value!r}")
            return tuple(kind(v) for v in value)
    raise ConfigError(key, f"类型应为 {type(default).__name__}, 实际 {value!r}")


@dataclass
class RunConfig:
    """
    运行配置树
    Sections plus the global seed and thread cap.
    """
    seed: int = 0
    threads: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradCheckConfig = field(default_factory=GradCheckConfig)

    # ------------------------------------------------------------------
    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = ()) -> "RunConfig":
        """读取配置文件并应用 `--set key=value` 覆盖"""
        config = cls()
        if path:
            config.update_from_file(path)
        for item in overrides:
            if '=' not in item:
                raise ConfigError(item, "覆盖项应为 key=value 形式")
            key, raw = item.split('=', 1)
            config.set(key.strip(), parse_value(raw))
        config.validate()
        return config

    def update_from_file(self, path: str) -> None:
        if not os.path.exists(path):
            raise ConfigError(path, "配置文件不存在")
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith('#'):
                    continue
                if '=' not in stripped:
                    raise ConfigError(f"{os.path.basename(path)}:{line_no}", f"无法解析的行: {stripped!r}")
                key, raw = stripped.split('=', 1)
                self.set(key.strip(), parse_value(raw))
        logger.info(f"已加载配置文件: {path}")

    def set(self, key: str, value) -> None:
        """设置单个键 (严格检查键名与类型)"""
        if key in TOP_LEVEL:
            setattr(self, key, _coerce(key, value, getattr(self, key)))
            return
        section_name, _, name = key.partition('.')
        if section_name not in SECTIONS or not name:
            raise ConfigError(key, "未知配置项")
        section = getattr(self, section_name)
        if name not in {f.name for f in fields(section)}:
            raise ConfigError(key, "未知配置项")
        setattr(section, name, _coerce(key, value, getattr(section, name)))

    def validate(self) -> "RunConfig":
        self.synth.validate()
        self.network.validate()
        self.train.validate()
        self.eval.validate()
        if self.threads < 1:
            raise ConfigError('threads', "线程数必须 >= 1")
        if self.network.n_landmarks != self.synth.n_landmarks:
            raise ConfigError('network.n_landmarks',
                              f"与 synth.n_landmarks={self.synth.n_landmarks} 不一致")
        pipeline = self.pipeline
        if pipeline.irp_steps < 0:
            raise ConfigError('pipeline.irp_steps', "必须 >= 0")
        if pipeline.top_k < 1:
            raise ConfigError('pipeline.top_k', "必须 >= 1")
        if pipeline.face_pad < 1:
            raise ConfigError('pipeline.face_pad', "必须 >= 1")
        if pipeline.batch_size < 1:
            raise ConfigError('pipeline.batch_size', "必须 >= 1")
        for key in ('candidate_threshold', 'final_threshold', 'visibility_threshold', 'nms_overlap'):
            if not 0 <= getattr(pipeline, key) <= 1:
                raise ConfigError(f'pipeline.{key}', "必须在 [0, 1] 内")
        if self.gradcheck.seeds < 1 or not self.gradcheck.step > 0:
            raise ConfigError('gradcheck.seeds', "种子数必须 >= 1 且步长为正")
        return self

    # ------------------------------------------------------------------
    def items(self) -> List[Tuple[str, object]]:
        """全部 (键, 当前值), 按文档顺序"""
        result: List[Tuple[str, object]] = [(key, getattr(self, key)) for key in TOP_LEVEL]
        for section_name in SECTIONS:
            section = getattr(self, section_name)
            for f in fields(section):
                result.append((f"{section_name}.{f.name}", getattr(section, f.name)))
        return result

    def to_dict(self) -> Dict[str, object]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in self.items()}

    def dumps(self) -> str:
        """序列化为配置文件文本"""
        lines = []
        for key, value in self.items():
            if isinstance(value, str):
                value = repr(value)
            elif value is None:
                value = 'none'
            elif isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def describe(cls) -> str:
        """全部配置项及默认值 (附于 --help 输出)"""
        lines = ["配置项 (section.key = 默认值    说明):"]
        for key, value in cls().items():
            lines.append(f"  {key} = {value!r}    {DESCRIPTIONS.get(key, '')}")
        return "\n".join(lines)

    def network_spec(self, arch: Optional[str] = None, task: Optional[str] = None) -> NetworkSpec:
        """按配置 (可指定结构) 构造网络描述"""
        if arch is None:
            return NetworkSpec.from_dict(self.network.to_dict()).validate()
        return self.network.variant(arch, task).validate()

    def lambdas(self) -> Tuple[float, ...]:
        return tuple(self.train.lambdas)
