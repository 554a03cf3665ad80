#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
人脸几何对齐 - 基于五个朴素关键点的相似变换
估计、应用、求逆相似变换，并在原图坐标系与对齐坐标系之间变换图片和关键点
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import cv2
import numpy as np

from landmark_errors import (CountMismatch, DegenerateInput, FormatError,
                             InvalidSize, NonInvertible)
from log_utils import get_logger

logger = get_logger('face_geometry')

# 尺度下限，低于该值视为不可逆
SCALE_FLOOR = 1e-12

# 默认对齐尺寸
ALIGNED_SIZE = 192


def as_landmarks(points, count: int = None) -> np.ndarray:
    """把输入转换为 (K, 2) float64 关键点数组并校验"""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise CountMismatch(f"关键点数组形状应为 (K, 2)，实际为 {pts.shape}")
    if count is not None and pts.shape[0] != count:
        raise CountMismatch(f"需要 {count} 个关键点，实际为 {pts.shape[0]} 个")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("关键点坐标包含非有限值")
    return pts


@dataclass(frozen=True)
class SimilarityTransform:
    """2x3 相似变换矩阵 (A | t)，A = s·R"""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(2, 3)
        m.setflags(write=False)
        object.__setattr__(self, 'matrix', m)

    @classmethod
    def identity(cls) -> 'SimilarityTransform':
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def from_params(cls, scale: float = 1.0, angle_deg: float = 0.0,
                    tx: float = 0.0, ty: float = 0.0) -> 'SimilarityTransform':
        """由尺度、旋转角（度）和平移构造"""
        theta = math.radians(angle_deg)
        c, s = math.cos(theta), math.sin(theta)
        return cls(np.array([[scale * c, -scale * s, tx],
                             [scale * s, scale * c, ty]]))

    @classmethod
    def about_center(cls, center: Tuple[float, float], scale: float = 1.0,
                     angle_deg: float = 0.0,
                     shift: Tuple[float, float] = (0.0, 0.0)) -> 'SimilarityTransform':
        """绕指定中心旋转缩放后再平移"""
        cx, cy = center
        rot = cls.from_params(scale, angle_deg)
        a = rot.linear
        t = np.array([cx + shift[0], cy + shift[1]]) - a @ np.array([cx, cy])
        return cls(np.hstack([a, t[:, None]]))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> 'SimilarityTransform':
        """从按行展开的 6 个浮点数恢复"""
        if len(values) != 6:
            raise FormatError(f"变换需要 6 个数值，实际为 {len(values)} 个")
        return cls(np.asarray(values, dtype=np.float64).reshape(2, 3))

    def to_list(self) -> list:
        return [float(v) for v in self.matrix.ravel()]

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def scale(self) -> float:
        det = float(np.linalg.det(self.linear))
        return math.sqrt(det) if det > 0 else 0.0

    @property
    def angle(self) -> float:
        """旋转角（度）"""
        return math.degrees(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def __matmul__(self, other: 'SimilarityTransform') -> 'SimilarityTransform':
        return compose(self, other)


def compose(outer: SimilarityTransform, inner: SimilarityTransform) -> SimilarityTransform:
    """复合变换：先 inner 后 outer"""
    return SimilarityTransform((outer.homogeneous() @ inner.homogeneous())[:2])


def estimate_similarity(src, dst) -> SimilarityTransform:
    """
    最小二乘相似变换估计（Umeyama 闭式解）

    Args:
        src: 源点 (N, 2)
        dst: 目标点 (N, 2)

    Returns:
        使 Σ‖T(src_i) − dst_i‖² 最小的相似变换
    """
    src = as_landmarks(src)
    dst = as_landmarks(dst, count=src.shape[0])
    n = src.shape[0]

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_demean = src - src_mean
    dst_demean = dst - dst_mean

    src_var = float((src_demean ** 2).sum()) / n
    magnitude = max(1.0, float(np.abs(src).max()))
    if src_var <= np.finfo(np.float64).eps * magnitude ** 2:
        raise DegenerateInput("源点全部重合，无法估计相似变换")

    cov = dst_demean.T @ src_demean / n
    u, sing, vt = np.linalg.svd(cov)

    # 只允许真旋转，排除镜像
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[1] = -1.0

    rotation = u @ np.diag(d) @ vt
    scale = float(sing @ d) / src_var
    a = scale * rotation
    t = dst_mean - a @ src_mean
    return SimilarityTransform(np.hstack([a, t[:, None]]))


def apply_points(transform: SimilarityTransform, points) -> np.ndarray:
    """对关键点应用变换：A·p + t"""
    pts = as_landmarks(points)
    return pts @ transform.linear.T + transform.translation


def invert(transform: SimilarityTransform) -> SimilarityTransform:
    """求逆变换"""
    det = float(np.linalg.det(transform.linear))
    if det <= SCALE_FLOOR ** 2:
        raise NonInvertible(f"变换尺度过小或含镜像，无法求逆 (det={det:.3e})")
    a_inv = np.linalg.inv(transform.linear)
    t_inv = -a_inv @ transform.translation
    return SimilarityTransform(np.hstack([a_inv, t_inv[:, None]]))


def warp_image(image: np.ndarray, transform: SimilarityTransform,
               out_w: int, out_h: int) -> np.ndarray:
    """
    按相似变换重采样图片：输出像素 (u, v) 取自 T⁻¹(u, v)，双线性插值，越界填黑
    """
    if image is None or image.size == 0:
        raise InvalidSize("输入图片为空")
    if out_w <= 0 or out_h <= 0:
        raise InvalidSize(f"输出尺寸非法: {out_w}x{out_h}")
    return cv2.warpAffine(image, transform.matrix, (int(out_w), int(out_h)),
                          flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT,
                          borderValue=0)


@dataclass(frozen=True)
class ReferenceTemplate:
    """对齐坐标系中的五点参考模板"""

    points: np.ndarray
    size: int = ALIGNED_SIZE

    def __post_init__(self):
        pts = as_landmarks(self.points, count=5).copy()
        pts.setflags(write=False)
        object.__setattr__(self, 'points', pts)

    @classmethod
    def default(cls, size: int = ALIGNED_SIZE) -> 'ReferenceTemplate':
        """
        对称默认模板：眼间距为宽度的 0.4，双眼与嘴角各自水平，关于 x = size/2 对称
        （原始模板未公开，此为替代值）
        """
        cx = size / 2.0
        half_eye = 0.2 * size
        half_mouth = 0.16 * size
        pts = np.array([
            [cx - half_eye, 0.40 * size],
            [cx + half_eye, 0.40 * size],
            [cx, 0.55 * size],
            [cx - half_mouth, 0.70 * size],
            [cx + half_mouth, 0.70 * size],
        ])
        return cls(pts, size)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'ReferenceTemplate':
        """从 JSON 读取模板: {"size": 192, "points": [[x, y], ...]}"""
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        try:
            return cls(np.asarray(data['points'], dtype=np.float64),
                       int(data.get('size', ALIGNED_SIZE)))
        except KeyError as e:
            raise FormatError(f"模板文件缺少字段 {e}: {path}") from e

    def to_dict(self) -> dict:
        return {'size': self.size, 'points': self.points.tolist()}

    def scaled(self, size: int) -> 'ReferenceTemplate':
        return ReferenceTemplate(self.points * (size / self.size), size)

    def is_symmetric(self, tol: float = 1e-9) -> bool:
        """检查双眼、嘴角水平且关于中线对称"""
        p = self.points
        cx = self.size / 2.0
        return (abs(p[0, 1] - p[1, 1]) <= tol
                and abs(p[3, 1] - p[4, 1]) <= tol
                and abs((p[0, 0] + p[1, 0]) / 2 - cx) <= tol
                and abs((p[3, 0] + p[4, 0]) / 2 - cx) <= tol
                and abs(p[2, 0] - cx) <= tol)


def align_face(image: np.ndarray, naive_points, template: ReferenceTemplate,
               size: int = None) -> Tuple[np.ndarray, SimilarityTransform]:
    """把五个朴素关键点对齐到模板，返回对齐图片与原图到对齐图的变换"""
    size = size or template.size
    if size != template.size:
        template = template.scaled(size)
    transform = estimate_similarity(naive_points, template.points)
    logger.debug(f"对齐变换: 尺度={transform.scale:.4f}, 角度={transform.angle:.2f}°")
    return warp_image(image, transform, size, size), transform
