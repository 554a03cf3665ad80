#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
文件读写 - 图片、关键点、变换、热图与权重张量

格式说明:
  关键点 CSV : 每行一个 "x,y"，行号即关键点编号
  关键点 JSON: [[x, y], ...]
  变换 JSON  : {"version": 1, "transform": [6 个数], "inverse": [6 个数]}
  热图二进制 : b'HMS1' + u32 K, H, W (小端) + K·H·W 个 float32
  张量二进制 : b'TNS1' + u32 rank + rank 个 u32 维度 + float32 数据
"""

import json
import struct
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np
from PIL import Image, ImageFile

from landmark_errors import FormatError
from log_utils import get_logger

# 配置PIL以处理损坏的图片文件
ImageFile.LOAD_TRUNCATED_IMAGES = True

logger = get_logger('landmark_io')

PathLike = Union[str, Path]

# 支持的图片格式
SUPPORTED_EXTENSIONS = {'.ppm', '.png', '.jpg', '.jpeg', '.bmp'}

HEATMAP_MAGIC = b'HMS1'
TENSOR_MAGIC = b'TNS1'
SCHEMA_VERSION = 1


def is_image_file(file_path: Path) -> bool:
    """检查文件是否为支持的图片格式"""
    return file_path.suffix.lower() in SUPPORTED_EXTENSIONS


def find_image_files(directory: PathLike) -> List[Path]:
    """查找目录中的所有图片文件（按文件名排序）"""
    directory = Path(directory)
    return sorted(p for p in directory.glob('*') if p.is_file() and is_image_file(p))


def read_image(path: PathLike) -> np.ndarray:
    """读取图片为 HxWx3 uint8 数组"""
    with Image.open(path) as img:
        if img.mode != 'RGB':
            img = img.convert('RGB')
        return np.array(img, dtype=np.uint8)


def write_image(path: PathLike, image: np.ndarray) -> Path:
    """按扩展名保存图片（.ppm 为二进制 P6）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.clip(np.rint(image), 0, 255).astype(np.uint8) if image.dtype != np.uint8 else image
    Image.fromarray(array).save(path)
    return path


def save_landmarks(path: PathLike, points) -> Path:
    """保存关键点，格式由扩展名决定 (.csv / .json)"""
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == '.csv':
        with open(path, 'w', encoding='utf-8') as f:
            for x, y in pts:
                f.write(f"{float(x)!r},{float(y)!r}\n")
    else:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(pts.tolist(), f)
    return path


def load_landmarks(path: PathLike) -> np.ndarray:
    """读取关键点 CSV / JSON / JD 标注文本"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == '.json':
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        if isinstance(data, dict):
            data = data.get('landmarks', [])
        pts = np.asarray(data, dtype=np.float64)
    elif suffix == '.csv':
        rows = []
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    x, y = line.split(',')
                    rows.append((float(x), float(y)))
                except ValueError as e:
                    raise FormatError(f"{path}:{line_no} 无法解析: {line}") from e
        pts = np.asarray(rows, dtype=np.float64)
    else:
        pts = load_jd_annotation(path)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FormatError(f"关键点文件形状错误: {path}")
    return pts


def load_jd_annotation(path: PathLike, count_line: str = 'auto') -> np.ndarray:
    """
    读取 JD 风格标注文本：可选的首行点数，之后每行 "x y"

    Args:
        count_line: 'auto' 自动判断, 'yes' 必须有点数行, 'no' 没有点数行
    """
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line.split() for line in f if line.strip()]
    if not lines:
        raise FormatError(f"标注文件为空: {path}")

    expected = None
    has_count = (count_line == 'yes'
                 or (count_line == 'auto' and len(lines[0]) == 1))
    if has_count:
        try:
            expected = int(lines[0][0])
        except ValueError as e:
            raise FormatError(f"点数行无法解析: {path}") from e
        lines = lines[1:]

    try:
        pts = np.asarray([(float(t[0]), float(t[1])) for t in lines], dtype=np.float64)
    except (ValueError, IndexError) as e:
        raise FormatError(f"标注坐标无法解析: {path}") from e
    if expected is not None and expected != len(pts):
        raise FormatError(f"标注点数不符: 声明 {expected}，实际 {len(pts)} ({path})")
    return pts


def save_jd_annotation(path: PathLike, points, with_count: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with open(path, 'w', encoding='utf-8') as f:
        if with_count:
            f.write(f"{len(pts)}\n")
        for x, y in pts:
            f.write(f"{float(x)!r} {float(y)!r}\n")
    return path


def save_transform(path: PathLike, transform, inverse=None) -> Path:
    """保存变换（及其逆）为 JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {'version': SCHEMA_VERSION, 'transform': transform.to_list()}
    if inverse is not None:
        payload['inverse'] = inverse.to_list()
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
    return path


def load_transform(path: PathLike) -> Tuple[List[float], List[float]]:
    """读取变换 JSON，返回 (transform, inverse) 两组 6 个数（inverse 可能为 None）"""
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    if 'transform' not in data:
        raise FormatError(f"变换文件缺少 transform 字段: {path}")
    return data['transform'], data.get('inverse')


def write_heatmap_stack(path: PathLike, values: np.ndarray) -> Path:
    """写出 HMS1 热图文件"""
    values = np.asarray(values)
    if values.ndim != 3:
        raise FormatError(f"热图应为 K×H×W 三维数组，实际为 {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k, h, w = values.shape
    with open(path, 'wb') as f:
        f.write(HEATMAP_MAGIC)
        f.write(struct.pack('<III', k, h, w))
        f.write(np.ascontiguousarray(values, dtype='<f4').tobytes())
    return path


def read_heatmap_stack(path: PathLike) -> np.ndarray:
    """读取 HMS1 热图文件，返回 float64 的 K×H×W 数组"""
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != HEATMAP_MAGIC:
        raise FormatError(f"不是 HMS1 热图文件: {path}")
    if len(raw) < 16:
        raise FormatError(f"HMS1 文件头不完整: {path}")
    k, h, w = struct.unpack('<III', raw[4:16])
    if (len(raw) - 16) % 4:
        raise FormatError(f"HMS1 数据长度不是 float32 的整数倍: {path}")
    payload = np.frombuffer(raw, dtype='<f4', offset=16)
    if payload.size != k * h * w:
        raise FormatError(f"HMS1 数据长度不符: 需要 {k * h * w}，实际 {payload.size} ({path})")
    return payload.reshape(k, h, w).astype(np.float64)


def write_tensor(path: PathLike, values: np.ndarray) -> Path:
    """写出 TNS1 张量文件（任意秩）"""
    values = np.asarray(values)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack('<I', values.ndim))
        f.write(struct.pack(f'<{values.ndim}I', *values.shape))
        f.write(np.ascontiguousarray(values, dtype='<f4').tobytes())
    return path


def read_tensor(path: PathLike) -> np.ndarray:
    """读取 TNS1 张量文件，返回 float32 数组"""
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"不是 TNS1 张量文件: {path}")
    if len(raw) < 8:
        raise FormatError(f"TNS1 文件头不完整: {path}")
    (rank,) = struct.unpack('<I', raw[4:8])
    header_end = 8 + 4 * rank
    if len(raw) < header_end or (len(raw) - header_end) % 4:
        raise FormatError(f"TNS1 文件头或数据不完整: {path}")
    dims = struct.unpack(f'<{rank}I', raw[8:header_end])
    payload = np.frombuffer(raw, dtype='<f4', offset=header_end)
    if payload.size != int(np.prod(dims)):
        raise FormatError(f"TNS1 数据长度不符: {path}")
    return payload.reshape(dims).astype(np.float32)


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"无法序列化类型: {type(value)}")


def save_report(report: Dict, report_file: PathLike) -> Path:
    """保存报告到文件"""
    report_file = Path(report_file)
    report_file.parent.mkdir(parents=True, exist_ok=True)
    report = dict(report)
    report.setdefault('timestamp', datetime.now().isoformat())
    with open(report_file, 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2, ensure_ascii=False, default=_json_default)

    logger.debug(f"报告已保存: {report_file}")
    return report_file


def write_lines(path: PathLike, lines: Iterable[str]) -> Path:
    """按行写出文本清单（跳过列表等）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for line in lines:
            f.write(f"{line}\n")
    return path
