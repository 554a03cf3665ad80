#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
关键点评估 - NME、CED 曲线、AUC@0.08、失败率

NME 以真值框面积的平方根 √(w·h) 归一化；CED 在 [0, max_threshold] 的
均匀网格（含两端）上统计 NME ≤ t 的比例；AUC 为梯形积分后除以 max_threshold。
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from scipy.integrate import trapezoid

from face_geometry import as_landmarks
from landmark_errors import CountMismatch, EmptyInput, InvalidConfig
from log_utils import get_logger

logger = get_logger('landmark_evaluation')

DEFAULT_MAX_THRESHOLD = 0.08
DEFAULT_STEPS = 1000


@dataclass
class GroundTruthRecord:
    """真值关键点与真值框 (x, y, w, h)"""

    landmarks: np.ndarray
    bbox: Tuple[float, float, float, float]
    image_id: str = ''

    def __post_init__(self):
        self.landmarks = as_landmarks(self.landmarks)
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise InvalidConfig(f"真值框宽高必须为正: {self.bbox}")

    @property
    def normalizer(self) -> float:
        return float(np.sqrt(self.bbox[2] * self.bbox[3]))


def nme(pred, gt: GroundTruthRecord) -> float:
    """平均欧氏距离 / √(w·h)；预测含非有限值时记为 inf"""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape != gt.landmarks.shape:
        raise CountMismatch(f"预测形状 {pred.shape} 与真值 {gt.landmarks.shape} 不符")
    if not np.all(np.isfinite(pred)):
        return float('inf')
    distances = np.linalg.norm(pred - gt.landmarks, axis=1)
    return float(distances.mean() / gt.normalizer)


def _as_nmes(nmes: Sequence[float]) -> np.ndarray:
    values = np.asarray(list(nmes), dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyInput("NME 列表为空")
    return values


@dataclass
class CEDCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def to_rows(self) -> List[Tuple[float, float]]:
        return [(float(t), float(f)) for t, f in zip(self.thresholds, self.fractions)]


def ced_curve(nmes: Sequence[float], max_threshold: float = DEFAULT_MAX_THRESHOLD,
              steps: int = DEFAULT_STEPS) -> CEDCurve:
    """累积误差分布：每个阈值 t 上 NME ≤ t 的图片比例"""
    values = _as_nmes(nmes)
    if steps < 2:
        raise InvalidConfig(f"CED 网格点数至少为 2，实际为 {steps}")
    if max_threshold <= 0:
        raise InvalidConfig(f"最大阈值必须为正，实际为 {max_threshold}")
    thresholds = np.linspace(0.0, max_threshold, steps)
    ordered = np.sort(values)
    fractions = np.searchsorted(ordered, thresholds, side='right') / values.size
    return CEDCurve(thresholds, fractions)


def auc(curve: CEDCurve) -> float:
    """CED 曲线下面积（梯形积分），按最大阈值归一化到 [0, 1]"""
    if curve.thresholds.size < 2:
        raise EmptyInput("CED 曲线至少需要两个采样点")
    span = curve.thresholds[-1] - curve.thresholds[0]
    return float(trapezoid(curve.fractions, curve.thresholds) / span)


def failure_rate(nmes: Sequence[float], threshold: float = DEFAULT_MAX_THRESHOLD) -> float:
    """NME 严格大于阈值的比例"""
    values = _as_nmes(nmes)
    return float(np.count_nonzero(values > threshold) / values.size)


def mean_nme(nmes: Sequence[float]) -> float:
    return float(_as_nmes(nmes).mean())


@dataclass
class MetricsReport:
    """评估结果"""

    nmes: List[float]
    curve: CEDCurve
    auc: float
    failure_rate: float
    mean_nme: float
    image_ids: List[str] = field(default_factory=list)
    max_threshold: float = DEFAULT_MAX_THRESHOLD
    label: str = ''

    @property
    def count(self) -> int:
        return len(self.nmes)

    def to_dict(self) -> Dict:
        finite = [v for v in self.nmes if np.isfinite(v)]
        return {
            'label': self.label,
            'count': self.count,
            'auc': self.auc,
            'failure_rate': self.failure_rate,
            'mean_nme': self.mean_nme if np.isfinite(self.mean_nme) else None,
            'mean_nme_finite': float(np.mean(finite)) if finite else None,
            'max_threshold': self.max_threshold,
            'steps': int(self.curve.thresholds.size),
            'per_image': [{'image': image_id, 'nme': value if np.isfinite(value) else None}
                          for image_id, value in zip(self.image_ids or [''] * self.count,
                                                     self.nmes)],
        }


def evaluate(nmes: Sequence[float], image_ids: Optional[Sequence[str]] = None,
             max_threshold: float = DEFAULT_MAX_THRESHOLD, steps: int = DEFAULT_STEPS,
             failure_threshold: Optional[float] = None, label: str = '') -> MetricsReport:
    """由逐图 NME 汇总出完整的评估报告"""
    values = _as_nmes(nmes)
    curve = ced_curve(values, max_threshold, steps)
    failure_threshold = max_threshold if failure_threshold is None else failure_threshold
    report = MetricsReport(
        nmes=[float(v) for v in values],
        curve=curve,
        auc=auc(curve),
        failure_rate=failure_rate(values, failure_threshold),
        mean_nme=mean_nme(values),
        image_ids=list(image_ids) if image_ids is not None else [],
        max_threshold=max_threshold,
        label=label,
    )
    logger.debug(f"评估完成: {report.count} 张, AUC={report.auc:.4f}, "
                 f"失败率={report.failure_rate:.4f}, 平均NME={report.mean_nme:.5f}")
    return report


def save_ced_csv(curve: CEDCurve, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['threshold', 'fraction'])
        for threshold, fraction in curve.to_rows():
            writer.writerow([f"{threshold:.8f}", f"{fraction:.8f}"])
    return path


def load_ced_csv(path: Union[str, Path]) -> CEDCurve:
    with open(path, 'r', encoding='utf-8') as f:
        rows = [(float(r['threshold']), float(r['fraction'])) for r in csv.DictReader(f)]
    if not rows:
        raise EmptyInput(f"CED 文件为空: {path}")
    data = np.asarray(rows)
    return CEDCurve(data[:, 0], data[:, 1])


def plot_ced(curves: Sequence[Tuple[str, CEDCurve]], out_path: Union[str, Path],
             title: Optional[str] = None) -> Path:
    """把一条或多条 CED 曲线画到同一张 SVG 图上，图例附 AUC"""
    if not curves:
        raise EmptyInput("没有可绘制的 CED 曲线")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, curve in curves:
        ax.plot(curve.thresholds, curve.fractions, label=f"{label} (AUC={auc(curve):.4f})")
    ax.set_xlabel('NME')
    ax.set_ylabel('Fraction of images')
    ax.set_xlim(0.0, max(float(c.thresholds[-1]) for _, c in curves))
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc='lower right')
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format='svg')
    plt.close(fig)
    logger.debug(f"CED 曲线已保存: {out_path}")
    return out_path
