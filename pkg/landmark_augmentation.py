#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
训练数据增强 - 水平翻转、刚性抖动、随机擦除、PCA 颜色扰动、颜色抖动

所有函数都是 (输入, 参数, 种子) 的纯函数：相同种子得到逐位相同的结果。
图片为 HxWx3 数组：uint8 取值 0-255，浮点图片取值 [0, 1]。
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.decomposition import PCA

from face_geometry import SimilarityTransform, apply_points, as_landmarks, warp_image
from landmark_errors import BadFlipMap, FormatError, InvalidConfig
from log_utils import get_logger

logger = get_logger('landmark_augmentation')

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]

# 自然图片的 RGB 协方差特征值/特征向量（列为特征向量，像素取值 [0, 1]）
DEFAULT_EIGVAL = np.array([0.2175, 0.0188, 0.0045])
DEFAULT_EIGVEC = np.array([
    [-0.5675, 0.7192, 0.4009],
    [-0.5808, -0.0045, -0.8140],
    [-0.5836, -0.6948, 0.4203],
])

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

FILL_MODES = ('uniform-noise', 'mean')


def _rng(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed)


def item_seed(global_seed: int, index: int) -> int:
    """由 (全局种子, 样本编号) 派生样本种子，与执行顺序无关"""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def _to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def _from_float(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    values = np.clip(values, 0.0, 1.0)
    if like.dtype == np.uint8:
        return np.rint(values * 255.0).astype(np.uint8)
    return values.astype(like.dtype)


@dataclass(frozen=True)
class FlipMap:
    """左右对称关键点的置换表，必须是对合"""

    perm: Tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(i) for i in self.perm)
        object.__setattr__(self, 'perm', perm)
        k = len(perm)
        if k == 0:
            raise BadFlipMap("翻转映射为空")
        if sorted(perm) != list(range(k)):
            raise BadFlipMap(f"翻转映射不是 0..{k - 1} 的置换")
        bad = [i for i in range(k) if perm[perm[i]] != i]
        if bad:
            raise BadFlipMap(f"翻转映射不是对合，出错的编号: {bad[:10]}")

    def __len__(self) -> int:
        return len(self.perm)

    @classmethod
    def identity(cls, k: int) -> 'FlipMap':
        return cls(tuple(range(k)))

    @classmethod
    def five_point(cls) -> 'FlipMap':
        """左眼↔右眼、鼻尖不变、左嘴角↔右嘴角"""
        return cls((1, 0, 2, 4, 3))

    @classmethod
    def from_pairs(cls, k: int, pairs: Iterable[Tuple[int, int]]) -> 'FlipMap':
        perm = list(range(k))
        for left, right in pairs:
            perm[left], perm[right] = right, left
        return cls(tuple(perm))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'FlipMap':
        """文本文件：K 行，第 i 行为关键点 i 的翻转目标编号"""
        with open(path, 'r', encoding='utf-8') as f:
            lines = [line.strip() for line in f if line.strip()]
        try:
            return cls(tuple(int(line) for line in lines))
        except ValueError as e:
            raise FormatError(f"翻转映射文件无法解析: {path}") from e

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(''.join(f"{i}\n" for i in self.perm), encoding='utf-8')
        return path


def flip_landmarks(landmarks, flip_map: FlipMap, width: float) -> np.ndarray:
    """新关键点 i 取旧关键点 map[i] 的坐标，x 镜像为 width−1−x"""
    pts = as_landmarks(landmarks)
    if len(flip_map) != pts.shape[0]:
        raise BadFlipMap(f"翻转映射长度 {len(flip_map)} 与关键点数 {pts.shape[0]} 不符")
    remapped = pts[list(flip_map.perm)]
    return np.column_stack([(width - 1) - remapped[:, 0], remapped[:, 1]])


def hflip(image: np.ndarray, landmarks, flip_map: FlipMap) -> Tuple[np.ndarray, np.ndarray]:
    """水平翻转图片与关键点，像素 (x, y) → (W−1−x, y)"""
    out = flip_landmarks(landmarks, flip_map, image.shape[1])
    return np.ascontiguousarray(image[:, ::-1]), out


@dataclass(frozen=True)
class JitterRanges:
    """
    刚性抖动范围（对称区间的半宽）

    rotation: 度, 1-15；scale: 尺度增量, 0.05-0.2；shift: 像素, 5-20；0 表示关闭
    """

    rotation: float = 15.0
    scale: float = 0.2
    shift: float = 20.0
    enable_rotation: bool = True
    enable_scale: bool = True
    enable_shift: bool = True

    def __post_init__(self):
        for name, value, low, high in (('rotation', self.rotation, 1.0, 15.0),
                                       ('scale', self.scale, 0.05, 0.2),
                                       ('shift', self.shift, 5.0, 20.0)):
            if value != 0 and not low <= value <= high:
                raise InvalidConfig(f"{name} 抖动范围应为 0 或 [{low}, {high}]，实际为 {value}")

    @classmethod
    def none(cls) -> 'JitterRanges':
        return cls(0.0, 0.0, 0.0)


def rigid_jitter(image: np.ndarray, landmarks, angle_deg: float = 0.0, scale: float = 1.0,
                 shift: Tuple[float, float] = (0.0, 0.0)
                 ) -> Tuple[np.ndarray, np.ndarray, SimilarityTransform]:
    """直接模式：按给定参数绕图片中心旋转缩放并平移，不限制范围"""
    h, w = image.shape[:2]
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    transform = SimilarityTransform.about_center(center, scale, angle_deg, shift)
    warped = warp_image(image, transform, w, h)
    return warped, apply_points(transform, landmarks), transform


def random_rigid(image: np.ndarray, landmarks, ranges: JitterRanges = JitterRanges(),
                 seed: SeedLike = None) -> Tuple[np.ndarray, np.ndarray, SimilarityTransform]:
    """在对称区间内均匀采样旋转、尺度与平移，返回变换以便追溯"""
    rng = _rng(seed)
    # 固定抽样次序，开关只影响取值
    u_angle, u_scale, u_dx, u_dy = rng.uniform(-1.0, 1.0, 4)
    angle = u_angle * ranges.rotation if ranges.enable_rotation else 0.0
    scale = 1.0 + (u_scale * ranges.scale if ranges.enable_scale else 0.0)
    shift = ((u_dx * ranges.shift, u_dy * ranges.shift) if ranges.enable_shift else (0.0, 0.0))
    return rigid_jitter(image, landmarks, float(angle), float(scale),
                        (float(shift[0]), float(shift[1])))


@dataclass(frozen=True)
class EraseParams:
    probability: float = 0.5
    area: Tuple[float, float] = (0.02, 0.4)
    aspect: Tuple[float, float] = (0.3, 1 / 0.3)
    fill_mode: str = 'uniform-noise'
    max_attempts: int = 10

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidConfig(f"擦除概率应在 [0, 1]，实际为 {self.probability}")
        low, high = self.area
        if not 0.0 < low <= high < 1.0:
            raise InvalidConfig(f"擦除面积比例应在 (0, 1) 内，实际为 {self.area}")
        if not 0.0 < self.aspect[0] <= self.aspect[1]:
            raise InvalidConfig(f"擦除宽高比范围非法: {self.aspect}")
        if self.fill_mode not in FILL_MODES:
            raise InvalidConfig(f"未知填充模式: {self.fill_mode}，可选 {FILL_MODES}")


def erase_box(shape: Tuple[int, ...], params: EraseParams,
              seed: SeedLike = None) -> Optional[Tuple[int, int, int, int]]:
    """
    采样擦除矩形 (top, left, h, w)，未触发或多次尝试都放不下时返回 None

    面积按比例均匀采样，宽高比在对数空间均匀采样
    """
    rng = _rng(seed)
    img_h, img_w = shape[:2]
    if rng.random() >= params.probability:
        return None
    area = img_h * img_w
    log_aspect = (math.log(params.aspect[0]), math.log(params.aspect[1]))
    for _ in range(params.max_attempts):
        target_area = rng.uniform(*params.area) * area
        aspect_ratio = math.exp(rng.uniform(*log_aspect))
        h = int(round(math.sqrt(target_area * aspect_ratio)))
        w = int(round(math.sqrt(target_area / aspect_ratio)))
        if 0 < h < img_h and 0 < w < img_w:
            top = int(rng.integers(0, img_h - h + 1))
            left = int(rng.integers(0, img_w - w + 1))
            return top, left, h, w
    logger.debug(f"随机擦除 {params.max_attempts} 次尝试均未放下矩形")
    return None


def random_erase(image: np.ndarray, params: EraseParams = EraseParams(),
                 seed: SeedLike = None) -> np.ndarray:
    """以给定概率擦除一个随机矩形（完全位于图片内）"""
    rng = _rng(seed)
    box = erase_box(image.shape, params, rng)
    out = image.copy()
    if box is None:
        return out
    top, left, h, w = box
    region = out[top:top + h, left:left + w]
    if params.fill_mode == 'mean':
        fill = image.reshape(-1, *image.shape[2:]).mean(axis=0)
        region[...] = np.rint(fill) if image.dtype == np.uint8 else fill
    elif image.dtype == np.uint8:
        region[...] = rng.integers(0, 256, region.shape, dtype=np.uint8)
    else:
        region[...] = rng.random(region.shape)
    return out


def pca_color(image: np.ndarray, eigval: np.ndarray = DEFAULT_EIGVAL,
              eigvec: np.ndarray = DEFAULT_EIGVEC, sigma: float = 0.05,
              seed: SeedLike = None, alpha: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    PCA 颜色扰动：每个像素加上 Σ αᵢλᵢvᵢ，α ~ N(0, σ²)，结果截断到合法范围

    alpha 给定时直接使用（测试用）
    """
    eigval = np.asarray(eigval, dtype=np.float64).reshape(3)
    eigvec = np.asarray(eigvec, dtype=np.float64).reshape(3, 3)
    if alpha is None:
        if sigma == 0:
            return image.copy()
        alpha = _rng(seed).normal(0.0, sigma, 3)
    shift = eigvec @ (np.asarray(alpha, dtype=np.float64) * eigval)
    return _from_float(_to_float(image) + shift, image)


def color_jitter(image: np.ndarray, strength: float = 0.4, seed: SeedLike = None,
                 factors: Optional[Tuple[float, float, float]] = None) -> np.ndarray:
    """
    依次调整亮度、对比度、饱和度，各因子独立取自 [1−s, 1+s]；因子为 1 的步骤跳过
    """
    if not 0.0 <= strength <= 1.0:
        raise InvalidConfig(f"颜色抖动强度应在 [0, 1]，实际为 {strength}")
    if factors is None:
        factors = tuple(_rng(seed).uniform(1.0 - strength, 1.0 + strength, 3))
    brightness, contrast, saturation = factors
    if brightness == 1 and contrast == 1 and saturation == 1:
        return image.copy()

    values = _to_float(image)
    if brightness != 1:
        values = np.clip(values * brightness, 0.0, 1.0)
    if contrast != 1:
        mean = float((values @ LUMA_WEIGHTS).mean())
        values = np.clip(mean + contrast * (values - mean), 0.0, 1.0)
    if saturation != 1:
        gray = (values @ LUMA_WEIGHTS)[..., None]
        values = np.clip(gray + saturation * (values - gray), 0.0, 1.0)
    return _from_float(values, image)


def estimate_pca_eigen(images: Iterable[np.ndarray],
                       max_pixels: int = 200000, seed: SeedLike = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    由图片集估计 RGB 协方差的特征值与特征向量（列为特征向量，像素取值 [0, 1]）

    像素过多时随机抽样 max_pixels 个
    """
    pixels = [_to_float(img).reshape(-1, 3) for img in images]
    if not pixels:
        raise InvalidConfig("估计 PCA 特征需要至少一张图片")
    data = np.concatenate(pixels, axis=0)
    if data.shape[0] > max_pixels:
        idx = _rng(seed).choice(data.shape[0], max_pixels, replace=False)
        data = data[idx]
    pca = PCA(n_components=3).fit(data)
    return pca.explained_variance_.copy(), pca.components_.T.copy()


def save_pca_eigen(path: Union[str, Path], eigval: np.ndarray, eigvec: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'eigval': np.asarray(eigval).tolist(), 'eigvec': np.asarray(eigvec).tolist()},
                  f, indent=2)
    return path


def load_pca_eigen(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    try:
        eigval = np.asarray(data['eigval'], dtype=np.float64).reshape(3)
        eigvec = np.asarray(data['eigvec'], dtype=np.float64).reshape(3, 3)
    except (KeyError, ValueError) as e:
        raise FormatError(f"PCA 特征文件格式错误: {path}") from e
    return eigval, eigvec


@dataclass
class AugmentationConfig:
    """训练样本增强链的配置"""

    flip_probability: float = 0.5
    jitter: JitterRanges = field(default_factory=JitterRanges)
    erase: EraseParams = field(default_factory=EraseParams)
    pca_sigma: float = 0.05
    color_strength: float = 0.4
    eigval: List[float] = field(default_factory=lambda: DEFAULT_EIGVAL.tolist())
    eigvec: List[List[float]] = field(default_factory=lambda: DEFAULT_EIGVEC.tolist())
    enable_flip: bool = True
    enable_jitter: bool = True
    enable_erase: bool = True
    enable_pca: bool = True
    enable_color: bool = True

    def __post_init__(self):
        if isinstance(self.jitter, dict):
            self.jitter = JitterRanges(**self.jitter)
        if isinstance(self.erase, dict):
            erase = dict(self.erase)
            for key in ('area', 'aspect'):
                if key in erase:
                    erase[key] = tuple(erase[key])
            self.erase = EraseParams(**erase)
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidConfig(f"翻转概率应在 [0, 1]，实际为 {self.flip_probability}")
        if self.pca_sigma < 0:
            raise InvalidConfig("pca_sigma 不能为负")
        if not 0.0 <= self.color_strength <= 1.0:
            raise InvalidConfig(f"颜色抖动强度应在 [0, 1]，实际为 {self.color_strength}")

    @classmethod
    def from_dict(cls, data: Dict) -> 'AugmentationConfig':
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"增强配置含未知字段: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


def augment_sample(image: np.ndarray, landmarks, flip_map: FlipMap,
                   cfg: AugmentationConfig = None, seed: SeedLike = None
                   ) -> Tuple[np.ndarray, np.ndarray, Dict]:
    """
    训练样本增强链：翻转 → 刚性抖动 → 随机擦除 → PCA 颜色 → 颜色抖动

    每一步使用由种子派生的独立子序列，关闭某一步不改变其他步骤的随机数
    """
    cfg = cfg or AugmentationConfig()
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2 ** 63))
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # 不用 spawn()：它会修改传入的 SeedSequence
    children = [np.random.SeedSequence(sequence.entropy, spawn_key=sequence.spawn_key + (i,))
                for i in range(5)]
    img = image
    pts = as_landmarks(landmarks)
    info: Dict = {'flipped': False, 'transform': None, 'erase_box': None}

    if cfg.enable_flip and _rng(children[0]).random() < cfg.flip_probability:
        img, pts = hflip(img, pts, flip_map)
        info['flipped'] = True
    if cfg.enable_jitter:
        img, pts, transform = random_rigid(img, pts, cfg.jitter, children[1])
        info['transform'] = transform.to_list()
    if cfg.enable_erase:
        info['erase_box'] = erase_box(img.shape, cfg.erase, children[2])
        img = random_erase(img, cfg.erase, children[2])
    if cfg.enable_pca:
        img = pca_color(img, cfg.eigval, cfg.eigvec, cfg.pca_sigma, children[3])
    if cfg.enable_color:
        img = color_jitter(img, cfg.color_strength, children[4])
    return img, pts, info
