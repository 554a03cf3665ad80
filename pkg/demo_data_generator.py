#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
演示数据生成器
生成合成人脸数据集（图片、检测器五点、JD 风格标注、翻转映射）用于测试与演示
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import cv2
import numpy as np

from face_geometry import ReferenceTemplate, SimilarityTransform, apply_points, warp_image
from landmark_augmentation import FlipMap
from landmark_io import save_jd_annotation, save_report, write_image
from landmark_pipeline import DetectorOutput, save_detections
from log_utils import get_logger

logger = get_logger('demo_data_generator')


@dataclass
class DemoSample:
    image_id: str
    image: np.ndarray
    landmarks: np.ndarray
    detection: DetectorOutput
    transform: SimilarityTransform


class DemoDataGenerator:
    """演示数据生成器"""

    def __init__(self, num_landmarks: int = 106, input_size: int = 192,
                 image_size: int = 256, seed: int = 0):
        self.num_landmarks = num_landmarks
        self.input_size = input_size
        self.image_size = image_size
        self.seed = seed
        self.template = ReferenceTemplate.default(input_size)
        self.base_shape = self._generate_base_shape()

    @property
    def mirror_axis(self) -> float:
        """对齐图水平翻转 (x → W−1−x) 的对称轴"""
        return (self.input_size - 1) / 2.0

    def _generate_base_shape(self) -> np.ndarray:
        """对齐坐标系中左右对称的平均脸形状：前一半为左侧点，后一半为其镜像，奇数时末点在中线上"""
        if self.num_landmarks == 5:
            return self.template.points.copy()
        rng = np.random.default_rng(self.seed)
        pairs = self.num_landmarks // 2
        size = self.input_size
        left = np.column_stack([
            rng.uniform(0.22 * size, self.mirror_axis - 2.0, pairs),
            rng.uniform(0.28 * size, 0.85 * size, pairs),
        ])
        right = np.column_stack([2 * self.mirror_axis - left[:, 0], left[:, 1]])
        parts = [left, right]
        if self.num_landmarks % 2:
            parts.append([[self.mirror_axis, 0.6 * size]])
        return np.vstack(parts)

    def flip_map(self) -> FlipMap:
        if self.num_landmarks == 5:
            return FlipMap.five_point()
        pairs = self.num_landmarks // 2
        return FlipMap.from_pairs(self.num_landmarks, [(i, i + pairs) for i in range(pairs)])

    def render_aligned_face(self, landmarks: np.ndarray, shade: int = 180) -> np.ndarray:
        """在对齐坐标系中绘制一张简单的人脸图"""
        size = self.input_size
        canvas = np.full((size, size, 3), 40, dtype=np.uint8)
        center = (size // 2, int(0.55 * size))
        cv2.ellipse(canvas, center, (int(0.36 * size), int(0.45 * size)), 0, 0, 360,
                    (shade, int(shade * 0.8), int(shade * 0.7)), -1)
        t = self.template.points
        for eye in t[:2]:
            cv2.circle(canvas, (int(round(eye[0])), int(round(eye[1]))), int(0.04 * size),
                       (30, 30, 30), -1)
        cv2.circle(canvas, (int(round(t[2][0])), int(round(t[2][1]))), int(0.025 * size),
                   (120, 80, 70), -1)
        mouth = t[3:5].round().astype(np.int32)
        cv2.line(canvas, tuple(int(v) for v in mouth[0]), tuple(int(v) for v in mouth[1]),
                 (90, 30, 40), 3)
        for x, y in landmarks:
            cv2.circle(canvas, (int(round(x)), int(round(y))), 1, (250, 250, 250), -1)
        return canvas

    def generate_sample(self, index: int, max_angle: float = 20.0,
                        naive_noise: float = 0.0, shape_noise: float = 1.0) -> DemoSample:
        """
        生成一个样本：对齐坐标系中的脸经随机相似变换放到原图中

        naive_noise 为 0 时检测五点恰好是模板的像，对齐变换精确还原
        """
        rng = np.random.default_rng([self.seed, index])
        aligned_pts = self.base_shape + rng.normal(0.0, shape_noise, self.base_shape.shape)
        aligned_img = self.render_aligned_face(aligned_pts, shade=int(rng.integers(150, 220)))

        scale = rng.uniform(0.8, 1.2)
        angle = rng.uniform(-max_angle, max_angle)
        center = np.array([self.input_size / 2.0, self.input_size / 2.0])
        target = np.array([self.image_size / 2.0, self.image_size / 2.0]) + rng.uniform(-10, 10, 2)
        placement = SimilarityTransform.from_params(scale, angle)
        t = target - placement.linear @ center
        placement = SimilarityTransform(np.hstack([placement.linear, t[:, None]]))

        image = warp_image(aligned_img, placement, self.image_size, self.image_size)
        landmarks = apply_points(placement, aligned_pts)
        naive = apply_points(placement, self.template.points)
        if naive_noise > 0:
            naive = naive + rng.normal(0.0, naive_noise, naive.shape)

        x0, y0 = landmarks.min(axis=0)
        x1, y1 = landmarks.max(axis=0)
        image_id = f"face_{index:04d}"
        detection = DetectorOutput((x0, y0, x1 - x0, y1 - y0), naive,
                                   float(rng.uniform(0.9, 1.0)), image_id)
        return DemoSample(image_id, image, landmarks, detection, placement)

    def generate(self, count: int, **kwargs) -> List[DemoSample]:
        return [self.generate_sample(i, **kwargs) for i in range(count)]

    def write_dataset(self, out_dir: Union[str, Path], count: int = 50,
                      drop_detections: int = 0, image_format: str = 'ppm',
                      **kwargs) -> Dict[str, Path]:
        """
        写出演示数据集:
          images/           原图
          annotations/      JD 风格标注（首行点数）
          detections.json   检测器输出（前 drop_detections 张图没有检测结果）
          flip_map.txt      翻转映射
        """
        out_dir = Path(out_dir)
        images_dir = out_dir / 'images'
        annotations_dir = out_dir / 'annotations'
        samples = self.generate(count, **kwargs)
        names = {}
        for sample in samples:
            name = f"{sample.image_id}.{image_format}"
            write_image(images_dir / name, sample.image)
            save_jd_annotation(annotations_dir / f"{sample.image_id}.pts", sample.landmarks)
            names[sample.image_id] = name

        kept = [s.detection for s in samples[drop_detections:]]
        detections_path = save_detections(out_dir / 'detections.json', kept, names)
        flip_map_path = self.flip_map().save(out_dir / 'flip_map.txt')
        save_report({
            'summary': {
                'count': count,
                'num_landmarks': self.num_landmarks,
                'image_size': self.image_size,
                'input_size': self.input_size,
                'without_detection': drop_detections,
                'seed': self.seed,
            },
        }, out_dir / 'demo_report.json')
        logger.info(f"演示数据集已生成: {count} 张图片 → {out_dir}")
        return {
            'images': images_dir,
            'annotations': annotations_dir,
            'detections': detections_path,
            'flip_map': flip_map_path,
        }


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    import argparse

    from log_utils import setup_logging

    parser = argparse.ArgumentParser(description='生成合成人脸关键点演示数据集')
    parser.add_argument('out_dir', help='输出目录')
    parser.add_argument('--count', type=int, default=50, help='图片数量 (默认: 50)')
    parser.add_argument('--landmarks', type=int, default=106, help='关键点数 (默认: 106)')
    parser.add_argument('--seed', type=int, default=0, help='随机种子 (默认: 0)')
    args = parser.parse_args(argv)

    setup_logging()
    generator = DemoDataGenerator(args.landmarks, seed=args.seed)
    paths = generator.write_dataset(args.out_dir, args.count)
    for key, path in paths.items():
        print(f"✅ {key}: {path}")
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
