#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数据增强测试
"""

import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# 添加当前目录到Python路径
sys.path.insert(0, str(Path(__file__).parent))

from face_geometry import ReferenceTemplate, apply_points
from landmark_augmentation import (DEFAULT_EIGVAL, DEFAULT_EIGVEC, AugmentationConfig, EraseParams,
                                   FlipMap, JitterRanges, augment_sample, color_jitter, erase_box,
                                   estimate_pca_eigen, hflip, item_seed, load_pca_eigen, pca_color,
                                   random_erase, random_rigid, rigid_jitter, save_pca_eigen)
from landmark_errors import BadFlipMap, InvalidConfig


def noise_image(seed: int, size: int = 192) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


class TestFlip(unittest.TestCase):
    """水平翻转测试"""

    def test_flip_twice_is_identity(self):
        img = noise_image(0, 64)
        pts = np.random.default_rng(1).integers(0, 256, (5, 2)) / 4.0
        flip_map = FlipMap.five_point()
        once_img, once_pts = hflip(img, pts, flip_map)
        twice_img, twice_pts = hflip(once_img, once_pts, flip_map)
        np.testing.assert_array_equal(twice_img, img)
        np.testing.assert_array_equal(twice_pts, pts)

    def test_midline_fixed(self):
        img = np.zeros((10, 193, 3), dtype=np.uint8)
        _, pts = hflip(img, [[96.0, 40.0]], FlipMap.identity(1))
        np.testing.assert_array_equal(pts, [[96.0, 40.0]])

    def test_five_point_swap(self):
        """对称模板翻转后左右互换，与原模板一致"""
        template = ReferenceTemplate.default()
        img = np.zeros((192, 193, 3), dtype=np.uint8)
        _, pts = hflip(img, template.points, FlipMap.five_point())
        np.testing.assert_allclose(pts, template.points, atol=1e-12)

    def test_pixel_mirror(self):
        img = noise_image(2, 16)
        flipped, _ = hflip(img, np.zeros((5, 2)), FlipMap.five_point())
        np.testing.assert_array_equal(flipped[3, 0], img[3, 15])

    def test_invalid_maps(self):
        with self.assertRaises(BadFlipMap):
            FlipMap((1, 2, 0))
        with self.assertRaises(BadFlipMap):
            FlipMap((0, 0, 2))
        with self.assertRaises(BadFlipMap):
            hflip(np.zeros((4, 4, 3)), np.zeros((3, 2)), FlipMap.five_point())

    def test_pairs_and_file(self):
        flip_map = FlipMap.from_pairs(6, [(0, 3), (1, 4)])
        self.assertEqual(flip_map.perm, (3, 4, 2, 0, 1, 5))
        with tempfile.TemporaryDirectory() as tmp:
            path = flip_map.save(Path(tmp) / 'flip_map.txt')
            self.assertEqual(FlipMap.from_file(path), flip_map)


class TestRigidJitter(unittest.TestCase):
    """刚性抖动测试"""

    def test_zero_ranges_identity(self):
        img = noise_image(3, 64)
        pts = np.array([[10.5, 20.25], [40.0, 33.0]])
        out_img, out_pts, transform = random_rigid(img, pts, JitterRanges.none(), seed=5)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_allclose(out_pts, pts, atol=1e-12)
        np.testing.assert_allclose(transform.linear, np.eye(2), atol=1e-12)

    def test_rotation_matches_hand_matrix(self):
        img = noise_image(4, 65)
        pts = np.array([[10.0, 20.0], [50.0, 5.0]])
        _, out_pts, _ = rigid_jitter(img, pts, angle_deg=90.0)
        center = np.array([32.0, 32.0])
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        expected = (pts - center) @ rot.T + center
        np.testing.assert_allclose(out_pts, expected, atol=1e-9)

    def test_seeded_and_traceable(self):
        img = noise_image(5, 96)
        pts = np.random.default_rng(6).uniform(10, 80, (20, 2))
        a_img, a_pts, a_t = random_rigid(img, pts, JitterRanges(), seed=42)
        b_img, b_pts, _ = random_rigid(img, pts, JitterRanges(), seed=42)
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_pts, b_pts)
        np.testing.assert_allclose(apply_points(a_t, pts), a_pts, atol=1e-9)

    def test_range_validation(self):
        with self.assertRaises(InvalidConfig):
            JitterRanges(rotation=30.0)
        with self.assertRaises(InvalidConfig):
            JitterRanges(shift=2.0)
        JitterRanges(rotation=0.0, scale=0.05, shift=5.0)


class TestRandomErase(unittest.TestCase):
    """随机擦除测试"""

    def test_probability_zero(self):
        img = noise_image(7)
        np.testing.assert_array_equal(random_erase(img, EraseParams(probability=0.0), seed=1), img)

    def test_fixed_area(self):
        img = noise_image(8)
        params = EraseParams(probability=1.0, area=(0.04, 0.04), aspect=(1.0, 1.0))
        box = erase_box(img.shape, params, seed=3)
        top, left, h, w = box
        self.assertEqual((h, w), (38, 38))
        self.assertTrue(0.03 * 192 ** 2 <= h * w <= 0.05 * 192 ** 2)

        out = random_erase(img, params, seed=3)
        changed = np.any(out != img, axis=2)
        mask = np.zeros_like(changed)
        mask[top:top + h, left:left + w] = True
        self.assertFalse(np.any(changed & ~mask))
        self.assertGreater(changed.sum(), 0.03 * 192 ** 2)

    def test_box_inside_image(self):
        params = EraseParams(probability=1.0)
        for seed in range(300):
            box = erase_box((120, 80, 3), params, seed=seed)
            if box is None:
                continue
            top, left, h, w = box
            self.assertTrue(0 <= top and top + h <= 120 and 0 <= left and left + w <= 80)

    def test_seeded(self):
        img = noise_image(9)
        params = EraseParams(probability=1.0)
        self.assertEqual(erase_box(img.shape, params, seed=11), erase_box(img.shape, params, seed=11))
        np.testing.assert_array_equal(random_erase(img, params, seed=11),
                                      random_erase(img, params, seed=11))

    def test_mean_fill(self):
        img = np.full((50, 50, 3), 80, dtype=np.uint8)
        out = random_erase(img, EraseParams(probability=1.0, fill_mode='mean'), seed=2)
        np.testing.assert_array_equal(out, img)

    def test_invalid_params(self):
        with self.assertRaises(InvalidConfig):
            EraseParams(probability=1.5)
        with self.assertRaises(InvalidConfig):
            EraseParams(area=(0.5, 1.0))


class TestColor(unittest.TestCase):
    """颜色扰动测试"""

    def test_pca_sigma_zero(self):
        img = noise_image(10, 32)
        np.testing.assert_array_equal(pca_color(img, sigma=0.0, seed=1), img)

    def test_pca_forced_alpha(self):
        img = np.full((4, 4, 3), 0.5)
        out = pca_color(img, alpha=(1.0, 0.0, 0.0))
        expected = 0.5 + DEFAULT_EIGVAL[0] * DEFAULT_EIGVEC[:, 0]
        np.testing.assert_allclose(out, np.broadcast_to(expected, img.shape), atol=1e-12)

    def test_pca_mean_shift(self):
        """多次采样的平均偏移在蒙特卡洛容差内为 0"""
        img = np.full((1, 1, 3), 0.5)
        n = 2000
        shifts = np.array([pca_color(img, seed=s)[0, 0] - 0.5 for s in range(n)])
        tolerance = 4 * 0.05 * DEFAULT_EIGVAL[0] / math.sqrt(n)
        self.assertTrue(np.all(np.abs(shifts.mean(axis=0)) < tolerance))

    def test_color_jitter_identity(self):
        img = noise_image(11, 32)
        np.testing.assert_array_equal(color_jitter(img, strength=0.0, seed=1), img)

    def test_brightness_factor(self):
        gray = np.full((4, 4, 3), 0.5)
        np.testing.assert_allclose(color_jitter(gray, factors=(1.4, 1.0, 1.0)), 0.7, atol=1e-12)
        bright = np.full((4, 4, 3), 200, dtype=np.uint8)
        self.assertTrue(np.all(color_jitter(bright, factors=(1.4, 1.0, 1.0)) == 255))

    def test_color_jitter_seeded(self):
        img = noise_image(12, 32)
        np.testing.assert_array_equal(color_jitter(img, seed=3), color_jitter(img, seed=3))
        with self.assertRaises(InvalidConfig):
            color_jitter(img, strength=1.5)

    def test_estimate_eigen(self):
        rng = np.random.default_rng(13)
        t = rng.uniform(0.1, 0.9, (2000, 1))
        pixels = np.clip(t + rng.normal(0.0, 0.01, (2000, 3)), 0.0, 1.0)
        eigval, eigvec = estimate_pca_eigen([pixels.reshape(40, 50, 3)])
        self.assertGreater(eigval[0], 10 * eigval[1])
        np.testing.assert_allclose(np.abs(eigvec[:, 0]), np.full(3, 1 / math.sqrt(3)), atol=0.02)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_pca_eigen(Path(tmp) / 'eigen.json', eigval, eigvec)
            loaded_val, loaded_vec = load_pca_eigen(path)
        np.testing.assert_allclose(loaded_val, eigval)
        np.testing.assert_allclose(loaded_vec, eigvec)


class TestAugmentSample(unittest.TestCase):
    """增强链测试"""

    def test_seeded_chain(self):
        img = noise_image(14, 96)
        pts = np.random.default_rng(15).uniform(10, 80, (5, 2))
        first = augment_sample(img, pts, FlipMap.five_point(), seed=item_seed(0, 3))
        second = augment_sample(img, pts, FlipMap.five_point(), seed=item_seed(0, 3))
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        self.assertEqual(first[2], second[2])

    def test_all_disabled(self):
        img = noise_image(16, 48)
        pts = np.array([[1.0, 2.0]] * 5)
        cfg = AugmentationConfig(enable_flip=False, enable_jitter=False, enable_erase=False,
                                 enable_pca=False, enable_color=False)
        out_img, out_pts, info = augment_sample(img, pts, FlipMap.five_point(), cfg, seed=1)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_pts, pts)
        self.assertFalse(info['flipped'])

    def test_item_seed(self):
        self.assertEqual(item_seed(7, 3), item_seed(7, 3))
        self.assertNotEqual(item_seed(7, 3), item_seed(7, 4))

    def test_config_dict(self):
        cfg = AugmentationConfig.from_dict({'jitter': {'rotation': 10.0},
                                            'erase': {'area': [0.05, 0.2]}})
        self.assertEqual(cfg.jitter.rotation, 10.0)
        self.assertEqual(cfg.erase.area, (0.05, 0.2))
        with self.assertRaises(InvalidConfig):
            AugmentationConfig.from_dict({'mixup': True})


if __name__ == '__main__':
    unittest.main(verbosity=2)
