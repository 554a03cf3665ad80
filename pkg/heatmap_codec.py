#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
热图编解码 - 关键点坐标与高斯热图之间的转换

解码提供三种方法:
  argmax   : 整像素最大值位置
  gradient : 在最大值位置沿梯度方向偏移 c 个像素
  gaussian : 在对数热图上做一步牛顿迭代，得到亚像素高斯中心
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from face_geometry import SimilarityTransform, apply_points, as_landmarks, invert
from landmark_errors import InvalidConfig, ShapeMismatch, SingularHessian
from log_utils import get_logger

logger = get_logger('heatmap_codec')

AMPLITUDE_MODES = ('peak-one', 'normalized')
DECODERS = ('argmax', 'gradient', 'gaussian')

# 取对数前的下限
LOG_FLOOR = 1e-10

# Hessian 行列式相对先验曲率 1/σ⁴ 的最小比例，低于该值视为奇异
MIN_CURVATURE_RATIO = 1e-6

# 解码标记
FLAG_OK = 'ok'
FLAG_BORDER = 'border'
FLAG_SINGULAR = 'singular'
FLAG_CLAMPED = 'clamped'


@dataclass(frozen=True)
class GaussianParams:
    """各向同性高斯参数（热图像素单位）"""

    sigma: float = 1.5
    amplitude_mode: str = 'peak-one'

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidConfig(f"sigma 必须大于 0，实际为 {self.sigma}")
        if self.amplitude_mode not in AMPLITUDE_MODES:
            raise InvalidConfig(f"未知的幅值模式: {self.amplitude_mode}")

    @property
    def amplitude(self) -> float:
        if self.amplitude_mode == 'normalized':
            return 1.0 / (2.0 * math.pi * self.sigma ** 2)
        return 1.0


@dataclass
class HeatmapStack:
    """K×H×W 热图堆栈，stride 为输入图尺寸与热图尺寸之比"""

    values: np.ndarray
    stride: float = 1.0
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeMismatch(f"热图应为 K×H×W，实际为 {self.values.shape}")
        _, h, w = self.values.shape
        if h < 3 or w < 3:
            raise ShapeMismatch(f"热图尺寸至少为 3×3，实际为 {h}×{w}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeMismatch("热图包含非有限值")
        if self.stride <= 0:
            raise InvalidConfig(f"stride 必须大于 0，实际为 {self.stride}")

    @property
    def num_landmarks(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class DecodedPoint:
    """热图坐标系下的解码结果"""

    x: float
    y: float
    score: float
    flag: str = FLAG_OK


def to_heatmap_frame(landmarks, stride: float) -> np.ndarray:
    """图像坐标 → 热图坐标"""
    return as_landmarks(landmarks) / float(stride)


def encode(landmarks, height: int, width: int,
           params: GaussianParams = GaussianParams(), stride: float = 1.0) -> HeatmapStack:
    """
    把热图坐标系下的关键点编码为高斯热图

    超出画面的关键点不报错，对应通道被截断，编号记录在 meta['out_of_frame']
    """
    pts = as_landmarks(landmarks)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    two_sigma_sq = 2.0 * params.sigma ** 2

    values = np.empty((pts.shape[0], height, width), dtype=np.float64)
    for i, (x, y) in enumerate(pts):
        values[i] = params.amplitude * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / two_sigma_sq)

    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= width - 1)
              & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1))
    out_of_frame = [int(i) for i in np.flatnonzero(~inside)]
    if out_of_frame:
        logger.debug(f"{len(out_of_frame)} 个关键点超出热图范围: {out_of_frame}")
    return HeatmapStack(values, stride=stride,
                        meta={'out_of_frame': out_of_frame, 'sigma': params.sigma,
                              'amplitude_mode': params.amplitude_mode})


def _argmax(channel: np.ndarray):
    """行优先最小索引的最大值位置"""
    idx = int(np.argmax(channel))
    row, col = divmod(idx, channel.shape[1])
    return col, row, float(channel[row, col])


def decode_argmax(stack: HeatmapStack) -> List[DecodedPoint]:
    points = []
    for channel in stack.values:
        x, y, score = _argmax(channel)
        points.append(DecodedPoint(float(x), float(y), score))
    return points


def _gradient_point(channel: np.ndarray, c: float) -> DecodedPoint:
    x, y, score = _argmax(channel)
    h, w = channel.shape
    if x == 0 or y == 0 or x == w - 1 or y == h - 1:
        return DecodedPoint(float(x), float(y), score, FLAG_BORDER)
    dx = channel[y, x + 1] - channel[y, x - 1]
    dy = channel[y + 1, x] - channel[y - 1, x]
    return DecodedPoint(x + c * float(np.sign(dx)), y + c * float(np.sign(dy)), score)


def decode_gradient(stack: HeatmapStack, c: float = 0.25) -> List[DecodedPoint]:
    """最大值位置沿中心差分梯度方向各轴偏移 c 像素；在边框上时退化为 argmax"""
    return [_gradient_point(channel, c) for channel in stack.values]


def _newton_offset(window: np.ndarray, min_det: float = 1e-12) -> np.ndarray:
    """3×3 对数窗口上的一步牛顿迭代，返回 (dx, dy) 偏移"""
    log_w = np.log(np.maximum(window, LOG_FLOOR))
    gx = 0.5 * (log_w[1, 2] - log_w[1, 0])
    gy = 0.5 * (log_w[2, 1] - log_w[0, 1])
    hxx = log_w[1, 2] - 2.0 * log_w[1, 1] + log_w[1, 0]
    hyy = log_w[2, 1] - 2.0 * log_w[1, 1] + log_w[0, 1]
    hxy = 0.25 * (log_w[2, 2] - log_w[2, 0] - log_w[0, 2] + log_w[0, 0])

    det = hxx * hyy - hxy * hxy
    # 局部极大值要求 Hessian 负定
    if not (det > min_det and hxx < 0):
        raise SingularHessian(f"Hessian 奇异或非负定 (det={det:.3e})")
    hessian = np.array([[hxx, hxy], [hxy, hyy]])
    gradient = np.array([gx, gy])
    return -np.linalg.solve(hessian, gradient)


def _gaussian_point(channel: np.ndarray, c: float, min_det: float) -> DecodedPoint:
    x, y, score = _argmax(channel)
    h, w = channel.shape
    if x < 1 or y < 1 or x > w - 2 or y > h - 2:
        fallback = _gradient_point(channel, c)
        return DecodedPoint(fallback.x, fallback.y, fallback.score, FLAG_BORDER)

    try:
        offset = _newton_offset(channel[y - 1:y + 2, x - 1:x + 2], min_det)
    except SingularHessian as e:
        logger.debug(f"高斯拟合退化为梯度解码: {e}")
        fallback = _gradient_point(channel, c)
        return DecodedPoint(fallback.x, fallback.y, fallback.score, FLAG_SINGULAR)

    clipped = np.clip(offset, -1.0, 1.0)
    flag = FLAG_CLAMPED if np.any(clipped != offset) else FLAG_OK
    return DecodedPoint(x + float(clipped[0]), y + float(clipped[1]), score, flag)


def decode_gaussian_fit(stack: HeatmapStack, params: GaussianParams = GaussianParams(),
                        c: float = 0.25) -> List[DecodedPoint]:
    """
    分布感知解码：在最大值处对 log H 做一步牛顿迭代
    μ = m − (∇² log H)⁻¹ ∇ log H，结果限制在最大值 1 像素内

    params 为生成热图的高斯先验：对数 Hessian 的期望行列式为 1/σ⁴，
    实测行列式低于其 MIN_CURVATURE_RATIO 倍时视为奇异并退化为梯度解码
    """
    min_det = MIN_CURVATURE_RATIO / params.sigma ** 4
    return [_gaussian_point(channel, c, min_det) for channel in stack.values]


def decode(stack: HeatmapStack, method: str = 'gaussian',
           params: GaussianParams = GaussianParams(), c: float = 0.25) -> List[DecodedPoint]:
    """按名称选择解码方法"""
    if method == 'argmax':
        return decode_argmax(stack)
    if method == 'gradient':
        return decode_gradient(stack, c)
    if method == 'gaussian':
        return decode_gaussian_fit(stack, params, c)
    raise InvalidConfig(f"未知的解码方法: {method}，可选 {DECODERS}")


def points_to_array(points: Sequence[DecodedPoint]) -> np.ndarray:
    return np.array([[p.x, p.y] for p in points], dtype=np.float64).reshape(-1, 2)


def to_image_frame(points: Union[Sequence[DecodedPoint], np.ndarray], stack_stride: float,
                   transform_align: Optional[SimilarityTransform] = None) -> np.ndarray:
    """热图坐标乘以 stride，再用对齐变换的逆恢复到原图坐标"""
    if stack_stride <= 0:
        raise InvalidConfig(f"stride 必须大于 0，实际为 {stack_stride}")
    if isinstance(points, np.ndarray):
        coords = as_landmarks(points)
    else:
        coords = points_to_array(points)
    coords = coords * float(stack_stride)
    if transform_align is None:
        return coords
    return apply_points(invert(transform_align), coords)


def flip_stack(stack: HeatmapStack, perm: Sequence[int], image_width: int) -> HeatmapStack:
    """
    把水平翻转图片上得到的热图映射回原方向（用于热图叠加式 TTA）

    图像列 x 镜像为 W−1−x；热图列 j 对应图像列 stride·j，
    因此原方向热图列 j 取翻转热图在 (W−1)/stride − j 处的线性插值
    """
    perm = list(perm)
    if len(perm) != stack.num_landmarks:
        raise ShapeMismatch(f"翻转映射长度 {len(perm)} 与通道数 {stack.num_landmarks} 不符")
    reversed_values = stack.values[perm, :, ::-1]
    offset = (image_width - 1) / stack.stride - (stack.width - 1)
    if offset != 0:
        reversed_values = ndimage.shift(reversed_values, (0.0, 0.0, offset),
                                        order=1, mode='nearest')
    return HeatmapStack(reversed_values, stride=stack.stride, meta=dict(stack.meta))
