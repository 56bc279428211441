#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成人脸数据生成器
Synthetic Face-Glyph Dataset Generator

每张图像由 (全局种子, 样本序号) 完全决定: 椭圆头部、眉毛、眼睛、鼻线、嘴弧,
按模板放置 21 个关键点, 再施加 roll / pitch / yaw 变换。
性别通过发弧粗细与肤色通道偏色区分。
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import tqdm

from core.errors import ConfigError, DataError, PreconditionError
from core.geometry import LandmarkSet, Region, iou
from core.image_processor import FaceImageProcessor, channel_means, save_ppm
from utils.seeding import named_rng

logger = logging.getLogger(__name__)

# 头部椭圆归一化坐标 (u 向右, v 向下) 中的 21 点模板
FACE_TEMPLATE = np.array([
    [-0.62, -0.50], [-0.40, -0.58], [-0.18, -0.50],   # 左眉
    [0.18, -0.50], [0.40, -0.58], [0.62, -0.50],      # 右眉
    [-0.55, -0.28], [-0.38, -0.28], [-0.21, -0.28],   # 左眼
    [0.21, -0.28], [0.38, -0.28], [0.55, -0.28],      # 右眼
    [-0.95, -0.12], [0.95, -0.12],                    # 耳
    [-0.14, 0.18], [0.0, 0.22], [0.14, 0.18],         # 鼻
    [-0.30, 0.45], [0.0, 0.48], [0.30, 0.45],         # 嘴
    [0.0, 0.90],                                      # 下巴
])
LANDMARK_NAMES = (
    'brow_l_out', 'brow_l_mid', 'brow_l_in', 'brow_r_in', 'brow_r_mid', 'brow_r_out',
    'eye_l_out', 'eye_l', 'eye_l_in', 'eye_r_in', 'eye_r', 'eye_r_out',
    'ear_l', 'ear_r', 'nose_l', 'nose_tip', 'nose_r',
    'mouth_l', 'mouth_mid', 'mouth_r', 'chin',
)
# 左右镜像对应关系
MIRROR_INDEX = (5, 4, 3, 2, 1, 0, 11, 10, 9, 8, 7, 6, 13, 12, 16, 15, 14, 19, 18, 17, 20)
# 瞳孔 (用于眼间距归一化)
EYE_CENTER_INDICES = (7, 10)
# 关键点数小于 21 时的保留顺序
LANDMARK_PRIORITY = (7, 10, 15, 17, 19, 1, 4, 20, 6, 8, 9, 11, 14, 16, 18, 0, 2, 3, 5, 12, 13)

# 特征点在 yaw/pitch 下绕头部曲面移动的深度
FEATURE_DEPTH = 0.65
HEAD_SEMI_AXES = (0.42, 0.5)

SKIN_BASE = (0.71, 0.565, 0.57)
GENDER_TINT = 0.09
HAIR_COLOR = (0.28, 0.20, 0.18)
FEATURE_COLOR = (0.18, 0.12, 0.12)
# 性别线性探针: mean(R) - mean(B) > 偏置 判为女性
GENDER_PROBE_BIAS = 0.10

_SHIFT = 4
_SCALE = 1 << _SHIFT


@dataclass
class SynthConfig:
    """合成数据配置"""
    image_size: int = 128
    max_faces: int = 3
    face_min: float = 36.0
    face_max: float = 64.0
    pose_limit: float = 60.0
    n_landmarks: int = 21
    noise_sigma: float = 0.03
    max_distractors: int = 4
    n_train: int = 2000
    n_test: int = 200

    def validate(self) -> "SynthConfig":
        """校验配置; 人脸尺度必须能完整放入图像"""
        if self.image_size < 64:
            raise ConfigError('synth.image_size', f"图像尺寸必须 >= 64, 实际 {self.image_size}")
        if not 0 <= self.max_faces <= 3:
            raise ConfigError('synth.max_faces', f"每图人脸数必须在 0-3 之间, 实际 {self.max_faces}")
        if not 16 <= self.face_min <= self.face_max:
            raise ConfigError('synth.face_min', f"需满足 16 <= face_min <= face_max, 实际 {self.face_min}/{self.face_max}")
        if self.face_max * 1.2 + 2 > self.image_size:
            raise ConfigError('synth.face_max', f"人脸尺度 {self.face_max} 超出图像 {self.image_size} 的可放置范围")
        if not 0 <= self.pose_limit <= 60:
            raise ConfigError('synth.pose_limit', f"姿态范围必须在 [0, 60] 度内, 实际 {self.pose_limit}")
        if not 2 <= self.n_landmarks <= len(FACE_TEMPLATE):
            raise ConfigError('synth.n_landmarks', f"关键点数必须在 2-{len(FACE_TEMPLATE)} 之间, 实际 {self.n_landmarks}")
        if self.noise_sigma < 0:
            raise ConfigError('synth.noise_sigma', "噪声标准差不能为负")
        if self.max_distractors < 0:
            raise ConfigError('synth.max_distractors', "干扰物数量不能为负")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError('synth.n_train', "样本数不能为负")
        return self

    def landmark_indices(self) -> np.ndarray:
        """模板中保留的关键点下标 (升序)"""
        return template_indices(self.n_landmarks)

    def digest(self) -> str:
        """配置哈希 (影响像素的字段)"""
        payload = {k: v for k, v in asdict(self).items() if k not in ('n_train', 'n_test')}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


def template_indices(n_landmarks: int) -> np.ndarray:
    """保留 n_landmarks 个关键点时, 各点在完整模板中的下标 (升序)"""
    return np.sort(np.array(LANDMARK_PRIORITY[:n_landmarks]))


def subset_positions(indices: Sequence[int], n_landmarks: int) -> Tuple[int, ...]:
    """
    完整模板下标 -> 子集中的位置
    Raises:
        PreconditionError: 某个下标不在保留的子集中
    """
    kept = template_indices(n_landmarks).tolist()
    missing = [i for i in indices if i not in kept]
    if missing:
        raise PreconditionError(f"模板关键点 {missing} 不在保留的 {n_landmarks} 个关键点中")
    return tuple(kept.index(i) for i in indices)


@dataclass
class FaceAnnotation:
    """
    人脸真值标注
    Ground-truth face: box, landmarks with visibility bits, pose (degrees), gender.
    """
    box: Region
    landmarks: LandmarkSet
    pose_deg: Tuple[float, float, float]
    gender: int

    def to_dict(self) -> Dict:
        return {
            'box': self.box.as_list(),
            'landmarks': [[float(x), float(y)] for x, y in self.landmarks.points],
            'visibility': [int(v) for v in self.landmarks.visibility],
            'pose_deg': [float(a) for a in self.pose_deg],
            'gender': int(self.gender),
        }

    @classmethod
    def from_dict(cls, record: Dict) -> "FaceAnnotation":
        try:
            box = Region(*[float(v) for v in record['box']])
            landmarks = LandmarkSet(record['landmarks'], record['visibility'])
            pose = tuple(float(a) for a in record['pose_deg'])
            gender = int(record['gender'])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"人脸标注格式错误: {e}") from e
        if len(pose) != 3:
            raise DataError(f"姿态应为 3 个角度, 实际 {len(pose)}")
        return cls(box, landmarks, pose, gender)

    def check(self, width: int, height: int, pose_limit: float = 90.0) -> List[str]:
        """返回违反的不变量列表 (空列表表示合法)"""
        problems = []
        if not self.landmarks.is_ground_truth():
            problems.append("可见性必须为 0 或 1")
        if self.gender not in (0, 1):
            problems.append(f"性别标签 {self.gender} 不在 {{0, 1}} 中")
        if any(abs(a) > pose_limit for a in self.pose_deg):
            problems.append(f"姿态 {self.pose_deg} 超出 ±{pose_limit}°")
        visible = self.landmarks.visible_mask()
        pts = self.landmarks.points[visible]
        if len(pts):
            inside = (pts[:, 0] >= 0) & (pts[:, 0] <= width) & (pts[:, 1] >= 0) & (pts[:, 1] <= height)
            if not np.all(inside):
                problems.append(f"{int((~inside).sum())} 个可见关键点位于图像外")
            cx, cy = pts.mean(axis=0)
            x1, y1, x2, y2 = self.box.corners()
            if not (x1 <= cx <= x2 and y1 <= cy <= y2):
                problems.append("人脸框不包含可见关键点质心")
        return problems


@dataclass
class SampleRecord:
    """一张合成图像及其标注"""
    image: np.ndarray
    faces: List[FaceAnnotation]
    scene_seed: Tuple[int, int]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def height(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetRecord:
    """标注文件中的一条记录"""
    image_path: str
    faces: List[FaceAnnotation]

    def load_image(self) -> np.ndarray:
        return FaceImageProcessor().load_image(self.image_path)


@dataclass
class DatasetManifest:
    """数据集清单"""
    root: str
    seed: int
    config: Dict
    config_hash: str
    splits: Dict[str, Dict] = field(default_factory=dict)

    def records(self, split: str) -> List[DatasetRecord]:
        if split not in self.splits:
            raise DataError(f"清单中没有 {split} 划分", self.root)
        return load_annotations(os.path.join(self.root, self.splits[split]['annotations']), self.root)

    @property
    def n_landmarks(self) -> int:
        return int(self.config.get('n_landmarks', len(FACE_TEMPLATE)))


# ----------------------------------------------------------------------
# 几何

def project_face(center: Tuple[float, float], size: float,
                 pose_deg: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, Region]:
    """
    按姿态投影模板关键点
    Returns (points N×2, visibility N, GT box) for the full template.

    yaw 把特征点水平平移并压缩, pitch 为竖直方向的类比, roll 为平面旋转。
    被推出头部椭圆的点记为不可见。
    """
    roll, pitch, yaw = np.radians(np.asarray(pose_deg, dtype=np.float64))
    semi_a, semi_b = HEAD_SEMI_AXES[0] * size, HEAD_SEMI_AXES[1] * size
    u = FACE_TEMPLATE[:, 0] * np.cos(yaw) + FEATURE_DEPTH * np.sin(yaw)
    v = FACE_TEMPLATE[:, 1] * np.cos(pitch) + FEATURE_DEPTH * np.sin(pitch)
    visibility = (u * u + v * v <= 1.0).astype(np.float64)

    px, py = u * semi_a, v * semi_b
    cos_r, sin_r = np.cos(roll), np.sin(roll)
    points = np.stack([center[0] + px * cos_r - py * sin_r,
                       center[1] + px * sin_r + py * cos_r], axis=1)

    box_w = 2.0 * np.sqrt((semi_a * cos_r) ** 2 + (semi_b * sin_r) ** 2)
    box_h = 2.0 * np.sqrt((semi_a * sin_r) ** 2 + (semi_b * cos_r) ** 2)
    return points, visibility, Region(float(center[0]), float(center[1]), float(box_w), float(box_h))


def _fixed(point) -> Tuple[int, int]:
    """连续坐标 -> cv2 亚像素定点坐标 (像素中心位于 +0.5)"""
    return (int(round((point[0] - 0.5) * _SCALE)), int(round((point[1] - 0.5) * _SCALE)))


def _color(rgb) -> Tuple[int, int, int]:
    return tuple(int(round(float(np.clip(c, 0, 1)) * 255)) for c in rgb)


# ----------------------------------------------------------------------
# 绘制

def _draw_distractors(canvas: np.ndarray, rng: np.random.Generator, count: int) -> None:
    size = canvas.shape[0]
    for _ in range(count):
        gray = rng.uniform(0.05, 0.95)
        color = _color(gray + rng.uniform(-0.08, 0.08, 3))
        kind = int(rng.integers(0, 3))
        x, y = (int(v) for v in rng.integers(0, size, 2))
        if kind == 0:
            w, h = (int(v) for v in rng.integers(6, 25, 2))
            cv2.rectangle(canvas, (x, y), (x + w, y + h), color, -1, cv2.LINE_8)
        elif kind == 1:
            x2, y2 = (int(v) for v in rng.integers(0, size, 2))
            cv2.line(canvas, (x, y), (x2, y2), color, int(rng.integers(1, 3)), cv2.LINE_8)
        else:
            cv2.circle(canvas, (x, y), int(rng.integers(2, 7)), color, -1, cv2.LINE_8)


def _polyline(canvas, points, visible, indices, color, thickness=1) -> None:
    for a, b in zip(indices[:-1], indices[1:]):
        if visible[a] and visible[b]:
            cv2.line(canvas, _fixed(points[a]), _fixed(points[b]), color, thickness, cv2.LINE_8, _SHIFT)


def _draw_face(canvas: np.ndarray, rng: np.random.Generator, center, size: float,
               pose_deg, gender: int, points: np.ndarray, visible: np.ndarray) -> None:
    roll = float(pose_deg[0])
    semi_a, semi_b = HEAD_SEMI_AXES[0] * size, HEAD_SEMI_AXES[1] * size
    tint = GENDER_TINT if gender == 1 else -GENDER_TINT
    skin = np.array(SKIN_BASE) + np.array([tint, 0.0, -tint]) + rng.uniform(-0.03, 0.03, 3)
    center_fx = _fixed(center)
    axes_fx = (int(round(semi_a * _SCALE)), int(round(semi_b * _SCALE)))

    cv2.ellipse(canvas, center_fx, axes_fx, roll, 0, 360, _color(skin), -1, cv2.LINE_8, _SHIFT)

    hair = _color(np.array(HAIR_COLOR) + rng.uniform(-0.03, 0.03, 3))
    thickness = max(3, int(round(size / 7))) if gender == 1 else max(1, int(round(size / 24)))
    cv2.ellipse(canvas, center_fx, axes_fx, roll, 200, 340, hair, thickness, cv2.LINE_8, _SHIFT)

    ink = _color(np.array(FEATURE_COLOR) + rng.uniform(-0.03, 0.03, 3))
    ear = _color(skin * 0.8)
    radius = max(1, int(round(size / 20)))
    for idx in (12, 13):
        if visible[idx]:
            cv2.circle(canvas, _fixed(points[idx]), radius * _SCALE, ear, -1, cv2.LINE_8, _SHIFT)
    _polyline(canvas, points, visible, (0, 1, 2), ink)
    _polyline(canvas, points, visible, (3, 4, 5), ink)
    _polyline(canvas, points, visible, (6, 7, 8), ink)
    _polyline(canvas, points, visible, (9, 10, 11), ink)
    eye_radius = max(1, int(round(size / 28)))
    for idx in EYE_CENTER_INDICES:
        if visible[idx]:
            cv2.circle(canvas, _fixed(points[idx]), eye_radius * _SCALE, ink, -1, cv2.LINE_8, _SHIFT)
    _polyline(canvas, points, visible, (14, 15, 16), ink)
    _polyline(canvas, points, visible, (17, 18, 19), ink)
    if visible[20]:
        tick = np.array([size * 0.05, 0.0])
        cv2.line(canvas, _fixed(points[20] - tick), _fixed(points[20] + tick), ink, 1, cv2.LINE_8, _SHIFT)


def _place_faces(rng: np.random.Generator, config: SynthConfig) -> List[Tuple]:
    """拒绝采样放置互不重叠的人脸"""
    n_faces = int(rng.integers(0, config.max_faces + 1))
    placed: List[Tuple] = []
    for _ in range(n_faces):
        for _attempt in range(50):
            size = float(rng.uniform(config.face_min, config.face_max))
            pose = tuple(float(a) for a in rng.uniform(-config.pose_limit, config.pose_limit, 3))
            _, _, box = project_face((0.0, 0.0), size, pose)
            margin = 0.1 * size + 1.0
            lo_x, hi_x = box.w / 2 + margin, config.image_size - box.w / 2 - margin
            lo_y, hi_y = box.h / 2 + margin, config.image_size - box.h / 2 - margin
            cx = float(rng.uniform(lo_x, hi_x))
            cy = float(rng.uniform(lo_y, hi_y))
            candidate = Region(cx, cy, box.w + 2 * margin, box.h + 2 * margin)
            if all(iou(candidate, other[3]) == 0.0 for other in placed):
                placed.append(((cx, cy), size, pose, candidate))
                break
    return placed


def render_sample(global_seed: int, index: int, config: SynthConfig) -> SampleRecord:
    """
    渲染一张合成图像
    Render sample ``index`` of the dataset seeded by ``global_seed``.
    """
    config.validate()
    rng = named_rng(global_seed, 'synth', index)
    size = config.image_size
    background = rng.uniform(0.15, 0.45) + rng.uniform(-0.03, 0.03, 3)
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = _color(background)

    _draw_distractors(canvas, rng, int(rng.integers(0, config.max_distractors + 1)))

    keep = config.landmark_indices()
    faces: List[FaceAnnotation] = []
    for center, face_size, pose, _ in _place_faces(rng, config):
        gender = int(rng.integers(0, 2))
        points, visible, box = project_face(center, face_size, pose)
        _draw_face(canvas, rng, center, face_size, pose, gender, points, visible)
        faces.append(FaceAnnotation(box, LandmarkSet(points[keep], visible[keep]), pose, gender))

    image = canvas.astype(np.float64) / 255.0
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, image.shape)
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return SampleRecord(quantized.transpose(2, 0, 1).astype(np.float64) / 255.0, faces, (int(global_seed), int(index)))


# ----------------------------------------------------------------------
# 数据集读写

def _record_line(image_rel: str, faces: Sequence[FaceAnnotation]) -> str:
    return json.dumps({'image': image_rel, 'faces': [f.to_dict() for f in faces]})


def generate_dataset(global_seed: int, n_train: int, n_test: int, config: SynthConfig,
                     out_dir: str, threads: int = 1, progress: bool = True) -> str:
    """
    生成数据集
    Write images, train/test annotation files and a manifest; returns the
    manifest path. Train indices are [0, n_train), test [n_train, n_train + n_test).
    """
    config.validate()
    image_dir = os.path.join(out_dir, 'images')
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"无法创建输出目录: {e}", out_dir) from e

    def produce(index: int) -> str:
        sample = render_sample(global_seed, index, config)
        rel = f"images/{index:06d}.ppm"
        save_ppm(os.path.join(out_dir, rel), sample.image)
        return _record_line(rel, sample.faces)

    splits = {'train': (0, n_train), 'test': (n_train, n_test)}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for split, (start, count) in splits.items():
            indices = range(start, start + count)
            lines = list(tqdm(pool.map(produce, indices), total=count,
                              desc=f"合成 {split}", disable=not progress))
            path = os.path.join(out_dir, f"{split}.jsonl")
            try:
                with open(path, 'w', encoding='utf-8', newline='\n') as f:
                    for line in lines:
                        f.write(line + '\n')
            except OSError as e:
                raise DataError(f"写入标注文件失败: {e}", path) from e

    manifest = {
        'format': 'face-synth-1',
        'seed': int(global_seed),
        'config': asdict(config),
        'config_hash': config.digest(),
        'splits': {name: {'annotations': f"{name}.jsonl", 'start': start, 'count': count}
                   for name, (start, count) in splits.items()},
    }
    manifest_path = os.path.join(out_dir, 'manifest.json')
    with open(manifest_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"数据集已生成: {out_dir} (训练 {n_train}, 测试 {n_test}, 种子 {global_seed})")
    return manifest_path


def load_annotations(path: str, root: Optional[str] = None) -> List[DatasetRecord]:
    """读取 JSON-lines 标注文件; 图像路径相对于 root (默认为标注文件所在目录)"""
    root = root if root is not None else os.path.dirname(os.path.abspath(path))
    if not os.path.exists(path):
        raise DataError("标注文件不存在", path)
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                faces = [FaceAnnotation.from_dict(face) for face in entry['faces']]
                image_path = os.path.join(root, entry['image'])
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as e:
                raise DataError(f"第 {line_no} 行解析失败: {e}", path) from e
            records.append(DatasetRecord(image_path, faces))
    return records


def load_manifest(path: str) -> DatasetManifest:
    """读取清单 (可传入清单文件或数据集目录)"""
    manifest_path = os.path.join(path, 'manifest.json') if os.path.isdir(path) else path
    if not os.path.exists(manifest_path):
        raise DataError("数据集清单不存在", manifest_path)
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
        return DatasetManifest(root=os.path.dirname(os.path.abspath(manifest_path)),
                               seed=int(doc['seed']), config=dict(doc['config']),
                               config_hash=str(doc['config_hash']), splits=dict(doc['splits']))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"清单格式错误: {e}", manifest_path) from e


def validate_dataset(path: str, check_images: bool = True) -> Dict:
    """
    数据集校验
    Run the FaceAnnotation invariants over every record of every split and
    check that train/test index ranges are disjoint.

    Raises:
        DataError: 存在违反不变量的记录
    """
    manifest = load_manifest(path)
    image_size = int(manifest.config.get('image_size', 128))
    pose_limit = float(manifest.config.get('pose_limit', 90.0))
    violations: List[str] = []
    counts = {'records': 0, 'faces': 0}

    ranges = sorted((s['start'], s['start'] + s['count'], name) for name, s in manifest.splits.items())
    for (_, end, name), (start, _, other) in zip(ranges[:-1], ranges[1:]):
        if start < end:
            violations.append(f"划分 {name} 与 {other} 的序号区间重叠")

    for split, info in manifest.splits.items():
        records = manifest.records(split)
        if len(records) != info['count']:
            violations.append(f"{split}: 记录数 {len(records)} 与清单 {info['count']} 不一致")
        for record in records:
            counts['records'] += 1
            width = height = image_size
            if check_images:
                if not os.path.exists(record.image_path):
                    violations.append(f"{record.image_path}: 图像文件缺失")
                    continue
                image = record.load_image()
                height, width = image.shape[1:]
            for face_no, face in enumerate(record.faces):
                counts['faces'] += 1
                for problem in face.check(width, height, pose_limit):
                    violations.append(f"{os.path.basename(record.image_path)} 人脸 {face_no}: {problem}")

    report = {**counts, 'violations': violations}
    if violations:
        for message in violations[:20]:
            logger.error(message)
        raise DataError(f"数据集校验失败: {len(violations)} 处违规", path)
    logger.info(f"数据集校验通过: {counts['records']} 条记录, {counts['faces']} 张人脸")
    return report


def gender_probe_feature(image: np.ndarray, box: Region) -> float:
    """性别探针特征: 真值框内 mean(R) - mean(B)"""
    means = channel_means(image, box)
    return means[0] - means[2]


def gender_probe_accuracy(samples: Iterable[Tuple[np.ndarray, Sequence[FaceAnnotation]]],
                          bias: float = GENDER_PROBE_BIAS) -> Tuple[float, int]:
    """
    固定线性探针的性别分类准确率 (生成器自检)
    Returns (accuracy, face count).
    """
    correct = total = 0
    for image, faces in samples:
        for face in faces:
            predicted = 1 if gender_probe_feature(image, face.box) > bias else 0
            correct += int(predicted == face.gender)
            total += 1
    accuracy = correct / total if total else 0.0
    logger.info(f"性别探针准确率: {accuracy:.3f} ({total} 张人脸)")
    return accuracy, total
