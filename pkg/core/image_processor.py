#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
人脸图像处理核心模块
Face Image Processing Core Module

图像在内存中统一为通道优先的浮点数组 (3×H×W, 取值 [0, 1], RGB 顺序),
磁盘上为 8 位二进制 PPM (P6)。
"""

import logging
import os
from typing import List, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

from core.errors import DataError, PreconditionError
from core.geometry import Region

logger = logging.getLogger(__name__)

# 性别对应的绘制颜色 (BGR): 男性蓝色, 女性粉色
GENDER_COLORS = {0: (255, 128, 0), 1: (180, 105, 255)}
LANDMARK_COLOR = (0, 200, 0)
UNKNOWN_COLOR = (0, 255, 255)


class FaceImageProcessor:
    """人脸图像处理器"""

    def __init__(self):
        """初始化图像处理器"""
        self.supported_formats = ['.ppm', '.pnm', '.png', '.jpg', '.jpeg', '.bmp']

    def load_image(self, image_path: str) -> np.ndarray:
        """
        加载图像
        Load an image file as a 3×H×W float array in [0, 1].
        """
        if not os.path.exists(image_path):
            logger.error(f"文件不存在: {image_path}")
            raise DataError("图像文件不存在", image_path)
        file_ext = os.path.splitext(image_path.lower())[1]
        if file_ext not in self.supported_formats:
            logger.error(f"不支持的文件格式: {file_ext}")
            raise DataError(f"不支持的文件格式: {file_ext}", image_path)

        bgr = cv2.imread(image_path, cv2.IMREAD_COLOR)
        if bgr is None:
            raise DataError("图像解码失败", image_path)
        rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
        image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0

        logger.debug(f"成功加载图像文件: {image_path}")
        return image


def to_uint8_hwc(image: np.ndarray) -> np.ndarray:
    """3×H×W [0,1] 浮点 -> H×W×3 uint8 (RGB)"""
    return np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(path: str, image: np.ndarray) -> str:
    """
    保存为 8 位二进制 PPM
    Save a 3×H×W float image (or H×W×3 uint8 RGB) as binary P6.
    """
    rgb = image if image.dtype == np.uint8 and image.ndim == 3 and image.shape[2] == 3 else to_uint8_hwc(image)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(path, cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DataError("写入图像失败", path)
    return path


def region_pixel_bounds(region: Region, width: int, height: int):
    """区域覆盖的整数像素范围 (裁剪到图像内)"""
    x1, y1, x2, y2 = region.corners()
    c1 = int(np.clip(np.floor(x1), 0, width))
    r1 = int(np.clip(np.floor(y1), 0, height))
    c2 = int(np.clip(np.ceil(x2), 0, width))
    r2 = int(np.clip(np.ceil(y2), 0, height))
    return r1, r2, c1, c2


def extract_roi(image: np.ndarray, region: Region) -> np.ndarray:
    """
    提取感兴趣区域 (不插值)
    Extract the integer-pixel ROI covered by a region.
    """
    _, height, width = image.shape
    r1, r2, c1, c2 = region_pixel_bounds(region, width, height)
    if r2 <= r1 or c2 <= c1:
        raise PreconditionError(f"区域 {region} 与图像无交集")
    return image[:, r1:r2, c1:c2]


def crop_and_resize(image: np.ndarray, region: Region, out_edge: int = 64) -> np.ndarray:
    """
    双线性裁剪缩放, 图像外区域补零
    Bilinear resample of a region's axis-aligned crop to 3×E×E.

    像素 j 的中心位于连续坐标 j + 0.5; 输出像素中心均匀落在区域内部。
    """
    channels, height, width = image.shape
    if not region.intersects(width, height):
        raise PreconditionError(f"区域 {region} 完全位于图像 {width}×{height} 之外")
    x0 = region.x - region.w / 2.0
    y0 = region.y - region.h / 2.0
    steps = np.arange(out_edge, dtype=np.float64) + 0.5
    xs = x0 + steps * (region.w / out_edge) - 0.5
    ys = y0 + steps * (region.h / out_edge) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing='ij')
    coords = np.stack([grid_y, grid_x])
    out = np.empty((channels, out_edge, out_edge), dtype=np.float64)
    for ch in range(channels):
        out[ch] = ndimage.map_coordinates(image[ch], coords, order=1,
                                          mode='grid-constant', cval=0.0)
    return out


def crop_batch(image: np.ndarray, regions: Sequence[Region], out_edge: int = 64) -> np.ndarray:
    """多个区域的裁剪结果 N×3×E×E"""
    return np.stack([crop_and_resize(image, r, out_edge) for r in regions])


def _box_color(det) -> Tuple[int, int, int]:
    if det.gender is None:
        return UNKNOWN_COLOR
    return GENDER_COLORS[int(det.gender)]


def draw_detections(image: np.ndarray, detections: Sequence, show_pose: bool = True) -> np.ndarray:
    """
    在图像上绘制检测结果 (框按性别着色, 绿色关键点, 框上方标注姿态)
    Burn boxes and landmarks into an H×W×3 uint8 RGB copy.
    """
    canvas = cv2.cvtColor(to_uint8_hwc(image), cv2.COLOR_RGB2BGR)
    for det in detections:
        x1, y1, x2, y2 = det.box.corners()
        color = _box_color(det)
        cv2.rectangle(canvas, (int(round(x1)), int(round(y1))),
                      (int(round(x2)), int(round(y2))), color, 1, cv2.LINE_8)
        if det.landmarks is not None:
            for px, py in det.landmarks.points[det.landmarks.visible_mask()]:
                cv2.circle(canvas, (int(round(px - 0.5)), int(round(py - 0.5))), 1,
                           LANDMARK_COLOR, -1, cv2.LINE_8)
        if show_pose and det.pose_deg is not None:
            label = ",".join(f"{a:.0f}" for a in det.pose_deg)
            cv2.putText(canvas, label, (int(round(x1)), max(8, int(round(y1)) - 2)),
                        cv2.FONT_HERSHEY_PLAIN, 0.6, color, 1, cv2.LINE_8)
    return cv2.cvtColor(canvas, cv2.COLOR_BGR2RGB)


def svg_overlay(image: np.ndarray, detections: Sequence, output_path: str) -> str:
    """
    矢量叠加图 (matplotlib SVG, 不含日期元数据)
    Write an SVG with the image and vector box/landmark overlays.
    """
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    from matplotlib import patches

    _, height, width = image.shape
    matplotlib.rcParams['svg.hashsalt'] = 'face-analysis'
    fig = plt.figure(figsize=(width / 50.0, height / 50.0), dpi=50)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(to_uint8_hwc(image), extent=(0, width, height, 0), interpolation='nearest')
    ax.set_xlim(0, width)
    ax.set_ylim(height, 0)
    ax.axis('off')
    for det in detections:
        x1, y1, _, _ = det.box.corners()
        color = tuple(c / 255.0 for c in reversed(_box_color(det)))
        ax.add_patch(patches.Rectangle((x1, y1), det.box.w, det.box.h,
                                       fill=False, edgecolor=color, linewidth=1.0))
        if det.landmarks is not None:
            pts = det.landmarks.points[det.landmarks.visible_mask()]
            if len(pts):
                ax.plot(pts[:, 0], pts[:, 1], 'o', color='#00c800', markersize=1.5)
        if det.pose_deg is not None:
            ax.text(x1, y1 - 1, ",".join(f"{a:.0f}" for a in det.pose_deg),
                    color=color, fontsize=5)
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    fig.savefig(output_path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return output_path


def channel_means(image: np.ndarray, region: Region) -> List[float]:
    """区域内各通道均值"""
    roi = extract_roi(image, region)
    return [float(v) for v in roi.mean(axis=(1, 2))]
