#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
关键点流水线 - 数据集对齐、模型运行器、翻转测试时平均与端到端评估

对齐目录结构:
  <stem>.ppm          对齐后的图片 (input_size × input_size)
  <stem>.tform.json   原图 → 对齐图的相似变换及其逆
  <stem>.pts.json     对齐坐标系中的真值关键点（有标注时）
  <stem>.gt.json      原图坐标系中的真值关键点与真值框（有标注时）
  manifest.json       成功对齐的样本清单
  skipped.txt         跳过的图片
  alignment_report.json
"""

import json
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from tqdm import tqdm

from face_geometry import (ReferenceTemplate, SimilarityTransform, apply_points, as_landmarks,
                           compose, estimate_similarity, invert, warp_image)
from head_planner import build_head, init_weights, load_weights, run_head
from heatmap_codec import (HeatmapStack, decode, encode, flip_stack, points_to_array,
                           to_heatmap_frame, to_image_frame)
from landmark_augmentation import FlipMap, flip_landmarks
from landmark_errors import (EmptyInput, FormatError, InvalidConfig, LandmarkError,
                             MissingDetection)
from landmark_evaluation import GroundTruthRecord, MetricsReport, evaluate, nme
from landmark_io import (find_image_files, load_landmarks, load_transform, read_heatmap_stack,
                         read_image, save_landmarks, save_report, save_transform,
                         write_heatmap_stack, write_image, write_lines)
from log_utils import get_logger
from pipeline_config import PipelineConfig

logger = get_logger('landmark_pipeline')

PathLike = Union[str, Path]

MANIFEST_NAME = 'manifest.json'
SKIPPED_NAME = 'skipped.txt'
ANNOTATION_SUFFIXES = ('.pts', '.txt', '.json', '.csv')


@dataclass(frozen=True)
class DetectorOutput:
    """人脸检测器输出：框 (x, y, w, h) 与按 左眼、右眼、鼻尖、左嘴角、右嘴角 排列的五点"""

    bbox: Tuple[float, float, float, float]
    naive: np.ndarray
    confidence: float = 1.0
    image_id: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'bbox', tuple(float(v) for v in self.bbox))
        object.__setattr__(self, 'naive', as_landmarks(self.naive, count=5))
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise InvalidConfig(f"检测框宽高必须为正: {self.bbox}")


def load_detections(path: PathLike, naive_order: Sequence[int] = (0, 1, 2, 3, 4)
                    ) -> Dict[str, DetectorOutput]:
    """
    读取检测器输出 JSON: [{"image": ..., "bbox": [x, y, w, h], "landmarks5": [[x, y] × 5],
    "confidence": ...}, ...]

    naive_order[i] 为标准顺序第 i 个点在检测器输出中的位置
    """
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise FormatError(f"检测结果应为 JSON 数组: {path}")
    order = list(naive_order)
    detections = {}
    for i, item in enumerate(data):
        try:
            image_id = Path(item['image']).stem
            raw = np.asarray(item['landmarks5'], dtype=np.float64)
            det = DetectorOutput(item['bbox'], raw[order], float(item.get('confidence', 1.0)),
                                 image_id)
        except (KeyError, TypeError, IndexError) as e:
            raise FormatError(f"检测结果第 {i} 项格式错误: {e}") from e
        detections[image_id] = det
    return detections


def save_detections(path: PathLike, detections: Sequence[DetectorOutput],
                    image_names: Optional[Dict[str, str]] = None) -> Path:
    image_names = image_names or {}
    payload = [{'image': image_names.get(d.image_id, d.image_id),
                'bbox': list(d.bbox),
                'landmarks5': d.naive.tolist(),
                'confidence': d.confidence} for d in detections]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
    return path


def find_annotation(annotations_dir: Optional[PathLike], image_id: str) -> Optional[Path]:
    if annotations_dir is None:
        return None
    for suffix in ANNOTATION_SUFFIXES:
        candidate = Path(annotations_dir) / f"{image_id}{suffix}"
        if candidate.exists():
            return candidate
    return None


@dataclass
class AlignedSample:
    """对齐目录中的一个样本"""

    image_id: str
    image_path: Path
    transform: SimilarityTransform
    inverse: Optional[SimilarityTransform] = None
    ground_truth: Optional[GroundTruthRecord] = None
    aligned_landmarks: Optional[np.ndarray] = None

    def read_image(self) -> np.ndarray:
        return read_image(self.image_path)


@dataclass
class AlignmentResult:
    samples: List[AlignedSample]
    skipped: List[str]
    report: Dict


def _align_one(image_path: Path, detection: Optional[DetectorOutput],
               template: ReferenceTemplate, out_dir: Path, cfg: PipelineConfig,
               annotations_dir: Optional[PathLike]) -> AlignedSample:
    image_id = image_path.stem
    if detection is None:
        raise MissingDetection(f"没有检测结果: {image_path.name}")
    image = read_image(image_path)
    transform = estimate_similarity(detection.naive, template.points)
    aligned = warp_image(image, transform, cfg.input_size, cfg.input_size)
    inverse = invert(transform)

    aligned_path = write_image(out_dir / f"{image_id}.{cfg.image_format}", aligned)
    save_transform(out_dir / f"{image_id}.tform.json", transform, inverse)

    sample = AlignedSample(image_id, aligned_path, transform, inverse)
    annotation = find_annotation(annotations_dir, image_id)
    if annotation is not None:
        gt = load_landmarks(annotation)
        record = GroundTruthRecord(gt, detection.bbox, image_id)
        sample.ground_truth = record
        sample.aligned_landmarks = apply_points(transform, gt)
        save_landmarks(out_dir / f"{image_id}.pts.json", sample.aligned_landmarks)
        with open(out_dir / f"{image_id}.gt.json", 'w', encoding='utf-8') as f:
            json.dump({'landmarks': gt.tolist(), 'bbox': list(detection.bbox)}, f)
    return sample


def align_dataset(images: Union[PathLike, Sequence[PathLike]],
                  detections: Dict[str, DetectorOutput], template: ReferenceTemplate,
                  out_dir: PathLike, cfg: Optional[PipelineConfig] = None,
                  annotations_dir: Optional[PathLike] = None) -> AlignmentResult:
    """
    对齐整个数据集：五点 → 模板的相似变换，重采样到 input_size，
    保存图片、变换及变换后的真值；无检测结果或读图失败的图片跳过并记入 skipped.txt
    """
    cfg = cfg or PipelineConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(images, (str, Path)):
        image_paths = find_image_files(images)
    else:
        image_paths = sorted(Path(p) for p in images)
    if template.size != cfg.input_size:
        template = template.scaled(cfg.input_size)

    logger.info(f"开始对齐 {len(image_paths)} 张图片 → {out_dir}")

    def task(path: Path):
        try:
            return _align_one(path, detections.get(path.stem), template, out_dir, cfg,
                              annotations_dir), None
        except (LandmarkError, OSError) as e:
            logger.warning(f"跳过 {path.name}: {e}")
            return None, path.stem

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(tqdm(pool.map(task, image_paths), total=len(image_paths), desc="对齐图片"))

    samples = [s for s, _ in results if s is not None]
    skipped = [stem for _, stem in results if stem is not None]

    manifest = {
        'version': 1,
        'input_size': cfg.input_size,
        'image_format': cfg.image_format,
        'template': template.to_dict(),
        'samples': [s.image_id for s in samples],
        'skipped': skipped,
    }
    with open(out_dir / MANIFEST_NAME, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    write_lines(out_dir / SKIPPED_NAME, skipped)
    if skipped:
        logger.warning(f"{len(skipped)} 张图片被跳过，清单见 {out_dir / SKIPPED_NAME}")

    scales = [s.transform.scale for s in samples]
    report = {
        'summary': {
            'total_images': len(image_paths),
            'aligned': len(samples),
            'skipped': len(skipped),
            'with_ground_truth': sum(1 for s in samples if s.ground_truth is not None),
            'mean_scale': float(np.mean(scales)) if scales else None,
            'input_size': cfg.input_size,
        },
        'template': template.to_dict(),
        'skipped_images': skipped,
    }
    save_report(report, out_dir / 'alignment_report.json')
    logger.info(f"对齐完成: 成功 {len(samples)} 张, 跳过 {len(skipped)} 张")
    return AlignmentResult(samples, skipped, report)


def load_aligned_dataset(aligned_dir: PathLike) -> Tuple[List[AlignedSample], List[str]]:
    """读取 align_dataset 生成的目录，返回 (样本列表, 跳过的图片编号)"""
    aligned_dir = Path(aligned_dir)
    manifest_path = aligned_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"对齐目录缺少 {MANIFEST_NAME}: {aligned_dir}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)

    image_format = manifest.get('image_format', 'ppm')
    samples = []
    for image_id in manifest.get('samples', []):
        forward, backward = load_transform(aligned_dir / f"{image_id}.tform.json")
        sample = AlignedSample(
            image_id,
            aligned_dir / f"{image_id}.{image_format}",
            SimilarityTransform.from_list(forward),
            SimilarityTransform.from_list(backward) if backward is not None else None,
        )
        gt_path = aligned_dir / f"{image_id}.gt.json"
        if gt_path.exists():
            with open(gt_path, 'r', encoding='utf-8') as f:
                gt = json.load(f)
            sample.ground_truth = GroundTruthRecord(gt['landmarks'], gt['bbox'], image_id)
            sample.aligned_landmarks = load_landmarks(aligned_dir / f"{image_id}.pts.json")
        samples.append(sample)
    return samples, list(manifest.get('skipped', []))


def transform_roundtrip_error(sample: AlignedSample) -> float:
    """保存的变换与保存的逆变换复合后与恒等变换的最大偏差"""
    inverse = sample.inverse if sample.inverse is not None else invert(sample.transform)
    identity = SimilarityTransform.identity().matrix
    return float(np.abs(compose(inverse, sample.transform).matrix - identity).max())


class ModelRunner(ABC):
    """把对齐图片映射为热图堆栈的预测器"""

    @abstractmethod
    def __call__(self, image: np.ndarray, *, image_id: str = '',
                 flipped: bool = False) -> HeatmapStack:
        raise NotImplementedError


class FileReplayRunner(ModelRunner):
    """回放预先计算的热图: <图片编号>.hms 与翻转图对应的 <图片编号>.flip.hms"""

    def __init__(self, directory: PathLike, stride: float = 2.0):
        self.directory = Path(directory)
        self.stride = float(stride)

    def path_for(self, image_id: str, flipped: bool = False) -> Path:
        return self.directory / (f"{image_id}.flip.hms" if flipped else f"{image_id}.hms")

    def __call__(self, image: np.ndarray, *, image_id: str = '',
                 flipped: bool = False) -> HeatmapStack:
        path = self.path_for(image_id, flipped)
        if not path.exists():
            raise FormatError(f"缺少回放热图: {path}")
        return HeatmapStack(read_heatmap_stack(path), stride=self.stride,
                            meta={'source': str(path)})


class BackboneStub:
    """
    骨干网络占位：把图片缩放到骨干输出分辨率，再用固定随机投影映射到 C_b 个通道

    只用于驱动上采样头的执行与计数，不代表真实特征
    """

    def __init__(self, backbone_out: Tuple[int, int, int], seed: int = 0):
        self.channels, self.height, self.width = backbone_out
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((self.channels, 3)).astype(np.float32) / np.sqrt(3.0)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        small = cv2.resize(image, (self.width, self.height), interpolation=cv2.INTER_AREA)
        pixels = small.astype(np.float32).reshape(-1, 3) / 255.0
        features = pixels @ self.projection.T
        return features.T.reshape(self.channels, self.height, self.width)


class HeadRunner(ModelRunner):
    """骨干占位 + 按策略构建的上采样头（随机或加载的权重）"""

    def __init__(self, cfg: PipelineConfig, weights_dir: Optional[PathLike] = None,
                 seed: Optional[int] = None):
        seed = cfg.seed if seed is None else seed
        self.graph = build_head(cfg.strategy_spec(), cfg.num_landmarks, cfg.cost_config())
        out_c, out_h, out_w = self.graph.output_shape
        if (out_h, out_w) != (cfg.heatmap_size, cfg.heatmap_size):
            raise InvalidConfig(f"策略 {cfg.strategy} 输出 {out_h}×{out_w}，"
                                f"与热图尺寸 {cfg.heatmap_size} 不符")
        weights_dir = weights_dir or cfg.weights_dir
        if weights_dir:
            self.weights = load_weights(self.graph, weights_dir)
        else:
            self.weights = init_weights(self.graph, seed)
        self.backbone = BackboneStub(cfg.backbone, seed)
        self.stride = cfg.input_size / out_h
        self.last_counter = None
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, image: np.ndarray, *, image_id: str = '',
                 flipped: bool = False) -> HeatmapStack:
        features = self.backbone(image)
        stack, counter = run_head(self.graph, self.weights, features, self.stride)
        # 每次调用的计数随结果返回，last_counter 仅供单线程查看
        stack.meta['macs'] = counter.macs
        with self._lock:
            self.last_counter = counter
            self.calls += 1
        return stack


def _decode_points(stack: HeatmapStack, cfg: PipelineConfig) -> np.ndarray:
    return points_to_array(decode(stack, cfg.decoder, cfg.gaussian_params(), cfg.gradient_c))


def tta_predict(runner: ModelRunner, aligned_img: np.ndarray, flip_map: FlipMap,
                cfg: Optional[PipelineConfig] = None, image_id: str = '') -> np.ndarray:
    """
    翻转测试时平均，返回热图坐标系下的关键点

    翻转图的预测先镜像回原方向（x → (W−1)/stride − x）并按翻转映射重排编号，
    再与原图预测逐坐标平均；tta_stack_heatmaps 时改为平均两张热图后解码一次
    """
    cfg = cfg or PipelineConfig()
    stack = runner(aligned_img, image_id=image_id, flipped=False)
    if not cfg.tta:
        return _decode_points(stack, cfg)

    flipped_img = np.ascontiguousarray(aligned_img[:, ::-1])
    flipped_stack = runner(flipped_img, image_id=image_id, flipped=True)
    image_width = aligned_img.shape[1]

    if cfg.tta_stack_heatmaps:
        unflipped = flip_stack(flipped_stack, flip_map.perm, image_width)
        merged = HeatmapStack((stack.values + unflipped.values) / 2.0, stride=stack.stride,
                              meta={'tta': 'stacked'})
        return _decode_points(merged, cfg)

    direct = _decode_points(stack, cfg)
    mirrored = _decode_points(flipped_stack, cfg)
    heatmap_width = (image_width - 1) / flipped_stack.stride + 1
    restored = flip_landmarks(mirrored, flip_map, heatmap_width)
    return (direct + restored) / 2.0


def predict_sample(runner: ModelRunner, sample: AlignedSample, flip_map: FlipMap,
                   cfg: PipelineConfig) -> np.ndarray:
    """单个样本的原图坐标系预测"""
    image = sample.read_image()
    points = tta_predict(runner, image, flip_map, cfg, sample.image_id)
    stride = cfg.input_size / cfg.heatmap_size
    return to_image_frame(points, stride, sample.transform)


def infer_dataset(samples: Sequence[AlignedSample], runner: ModelRunner, flip_map: FlipMap,
                  cfg: PipelineConfig, out_dir: PathLike) -> Dict[str, Path]:
    """对每个样本预测并把原图坐标系的关键点保存为 <图片编号>.csv"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, failed = {}, []
    for sample in tqdm(sorted(samples, key=lambda s: s.image_id), desc="预测关键点"):
        try:
            points = predict_sample(runner, sample, flip_map, cfg)
        except (LandmarkError, OSError) as e:
            logger.warning(f"预测失败 {sample.image_id}: {e}")
            failed.append(sample.image_id)
            continue
        written[sample.image_id] = save_landmarks(out_dir / f"{sample.image_id}.csv", points)
    if failed:
        write_lines(out_dir / 'failed_files.txt', failed)
    logger.info(f"预测完成: {len(written)} 张, 失败 {len(failed)} 张")
    return written


def end_to_end_eval(samples: Sequence[AlignedSample], runner: ModelRunner,
                    cfg: Optional[PipelineConfig] = None, flip_map: Optional[FlipMap] = None,
                    skipped_ids: Sequence[str] = ()) -> MetricsReport:
    """
    端到端评估：预测 → 逆变换回原图 → NME

    预测失败与上游对齐失败（skipped_ids）的图片记 NME = inf，计为失败
    """
    cfg = cfg or PipelineConfig()
    flip_map = flip_map or cfg.load_flip_map()
    scored = sorted((s for s in samples if s.ground_truth is not None), key=lambda s: s.image_id)
    missing_gt = len(samples) - len(scored)
    if missing_gt:
        logger.warning(f"{missing_gt} 个样本没有真值，不参与评估")
    if not scored and not skipped_ids:
        raise EmptyInput("没有可评估的样本")

    def task(sample: AlignedSample) -> float:
        try:
            return nme(predict_sample(runner, sample, flip_map, cfg), sample.ground_truth)
        except (LandmarkError, OSError) as e:
            logger.warning(f"评估样本 {sample.image_id} 失败，记为失败: {e}")
            return float('inf')

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        values = list(tqdm(pool.map(task, scored), total=len(scored), desc="评估"))

    image_ids = [s.image_id for s in scored]
    for image_id in sorted(skipped_ids):
        image_ids.append(image_id)
        values.append(float('inf'))
    return evaluate(values, image_ids, steps=cfg.ced_steps,
                    failure_threshold=cfg.failure_threshold)


def write_replay_stacks(samples: Sequence[AlignedSample], out_dir: PathLike,
                        cfg: Optional[PipelineConfig] = None,
                        flip_map: Optional[FlipMap] = None) -> int:
    """
    把对齐后的真值编码为回放热图（原图与翻转图各一份），供 FileReplayRunner 使用

    返回写出的样本数
    """
    cfg = cfg or PipelineConfig()
    flip_map = flip_map or cfg.load_flip_map()
    out_dir = Path(out_dir)
    stride = cfg.input_size / cfg.heatmap_size
    params = cfg.gaussian_params()
    count = 0
    for sample in samples:
        if sample.aligned_landmarks is None:
            continue
        direct = to_heatmap_frame(sample.aligned_landmarks, stride)
        mirrored = to_heatmap_frame(
            flip_landmarks(sample.aligned_landmarks, flip_map, cfg.input_size), stride)
        for name, points in ((f"{sample.image_id}.hms", direct),
                             (f"{sample.image_id}.flip.hms", mirrored)):
            stack = encode(points, cfg.heatmap_size, cfg.heatmap_size, params, stride)
            write_heatmap_stack(out_dir / name, stack.values)
        count += 1
    logger.info(f"已写出 {count} 组回放热图 → {out_dir}")
    return count
