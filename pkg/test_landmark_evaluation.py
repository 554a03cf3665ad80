#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
评估指标测试
"""

import json
import logging
import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# 添加当前目录到Python路径
sys.path.insert(0, str(Path(__file__).parent))

from face_geometry import SimilarityTransform, apply_points
from landmark_errors import CountMismatch, EmptyInput, InvalidConfig
from landmark_evaluation import (GroundTruthRecord, auc, ced_curve, evaluate, failure_rate,
                                 load_ced_csv, mean_nme, nme, plot_ced, save_ced_csv)


def ced_loop(nmes, thresholds):
    """逐阈值逐图计数的 CED"""
    fractions = []
    for t in thresholds:
        hits = 0
        for value in nmes:
            if value <= t:
                hits += 1
        fractions.append(hits / len(nmes))
    return fractions


def auc_loop(thresholds, fractions):
    """逐区间梯形面积，除以阈值跨度"""
    area = 0.0
    for i in range(len(thresholds) - 1):
        area += (thresholds[i + 1] - thresholds[i]) * (fractions[i] + fractions[i + 1]) / 2.0
    return area / (thresholds[-1] - thresholds[0])


def failure_loop(nmes, threshold=0.08):
    return sum(1 for value in nmes if value > threshold) / len(nmes)


class TestNME(unittest.TestCase):
    """NME 测试"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.gt = GroundTruthRecord(rng.uniform(0, 100, (106, 2)), (0, 0, 100, 100))

    def test_exact_prediction(self):
        self.assertEqual(nme(self.gt.landmarks, self.gt), 0.0)

    def test_three_four_five(self):
        self.assertAlmostEqual(nme(self.gt.landmarks + [3.0, 4.0], self.gt), 0.05, places=12)

    def test_random_vs_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            w, h = rng.uniform(20, 200, 2)
            gt = GroundTruthRecord(rng.uniform(0, 200, (106, 2)), (5, 5, w, h))
            pred = gt.landmarks + rng.normal(0, 3, (106, 2))
            total = 0.0
            for (px, py), (gx, gy) in zip(pred, gt.landmarks):
                total += math.sqrt((px - gx) ** 2 + (py - gy) ** 2)
            self.assertAlmostEqual(nme(pred, gt), total / 106 / math.sqrt(w * h), delta=1e-12)

    def test_rigid_invariance_and_scaling(self):
        rng = np.random.default_rng(2)
        pred = self.gt.landmarks + rng.normal(0, 2, (106, 2))
        base = nme(pred, self.gt)
        motion = SimilarityTransform.from_params(1.0, 33.0, 12.0, -7.0)
        moved = GroundTruthRecord(apply_points(motion, self.gt.landmarks), self.gt.bbox)
        self.assertAlmostEqual(nme(apply_points(motion, pred), moved), base, delta=1e-12)
        scaled = self.gt.landmarks + 2.5 * (pred - self.gt.landmarks)
        self.assertAlmostEqual(nme(scaled, self.gt), 2.5 * base, delta=1e-12)

    def test_errors(self):
        with self.assertRaises(CountMismatch):
            nme(self.gt.landmarks[:5], self.gt)
        with self.assertRaises(InvalidConfig):
            GroundTruthRecord(self.gt.landmarks, (0, 0, 0, 10))
        pred = self.gt.landmarks.copy()
        pred[0, 0] = np.nan
        self.assertEqual(nme(pred, self.gt), float('inf'))


class TestCED(unittest.TestCase):
    """CED、AUC 与失败率测试"""

    def test_constant_curves(self):
        np.testing.assert_array_equal(ced_curve([0.0, 0.0]).fractions, 1.0)
        np.testing.assert_array_equal(ced_curve([0.09, 0.2]).fractions, 0.0)

    def test_hand_enumeration(self):
        curve = ced_curve([0.02, 0.06], steps=5)
        np.testing.assert_allclose(curve.thresholds, [0.0, 0.02, 0.04, 0.06, 0.08])
        np.testing.assert_array_equal(curve.fractions, [0.0, 0.5, 0.5, 1.0, 1.0])

    def test_all_zero(self):
        self.assertAlmostEqual(auc(ced_curve([0.0] * 4)), 1.0, places=12)
        self.assertEqual(failure_rate([0.0] * 4), 0.0)
        self.assertEqual(mean_nme([0.0] * 4), 0.0)

    def test_failure_rate(self):
        self.assertEqual(failure_rate([0.04, 0.09]), 0.5)
        self.assertEqual(failure_rate([0.08]), 0.0)

    def test_step_cdf_area(self):
        steps = 1000
        self.assertAlmostEqual(auc(ced_curve([0.02, 0.06], steps=steps)), 0.5, delta=1.0 / steps)

    def test_below_first_threshold(self):
        steps = 1000
        value = auc(ced_curve([1e-6, 2e-5], steps=steps))
        self.assertAlmostEqual(value, 1.0 - 1.0 / (2 * (steps - 1)), places=12)

    def test_random_properties(self):
        """AUC ∈ [0,1]，失败率与 CED 终点互补，加密网格变化不超过 1/steps"""
        rng = np.random.default_rng(3)
        for _ in range(50):
            nmes = rng.exponential(0.04, int(rng.integers(1, 200)))
            curve = ced_curve(nmes, steps=200)
            self.assertTrue(np.all(np.diff(curve.fractions) >= 0))
            value = auc(curve)
            self.assertTrue(0.0 <= value <= 1.0)
            self.assertAlmostEqual(failure_rate(nmes) + curve.fractions[-1], 1.0, places=12)
            self.assertLessEqual(abs(auc(ced_curve(nmes, steps=400)) - value), 1.0 / 200)

    def test_against_scalar_loops(self):
        """50 组随机数据（含并列值、恰在阈值上的值、全部超出上限）与标量循环一致"""
        rng = np.random.default_rng(4)
        steps = 101
        grid = np.linspace(0.0, 0.08, steps)
        datasets = [[0.1, 0.2, 0.09], [0.08, 0.08, 0.0], list(grid[[3, 3, 50, 100]])]
        for _ in range(47):
            n = int(rng.integers(1, 80))
            values = rng.exponential(0.04, n)
            values[rng.random(n) < 0.2] = grid[rng.integers(0, steps)]
            if n > 1:
                values[-1] = values[0]
            datasets.append(list(values))
        for values in datasets:
            curve = ced_curve(values, steps=steps)
            expected = ced_loop(values, curve.thresholds)
            np.testing.assert_allclose(curve.fractions, expected, rtol=0, atol=1e-12)
            self.assertAlmostEqual(auc(curve), auc_loop(curve.thresholds, expected), delta=1e-12)
            self.assertAlmostEqual(failure_rate(values), failure_loop(values), delta=1e-12)
        self.assertEqual(auc(ced_curve([0.1, 0.2, 0.09])), 0.0)
        self.assertEqual(failure_rate([0.1, 0.2, 0.09]), 1.0)
        self.assertEqual(failure_rate([0.08, 0.08, 0.0]), 0.0)

    def test_infinite_nme_is_failure(self):
        report = evaluate([0.0, float('inf')], ['a', 'b'])
        self.assertEqual(report.failure_rate, 0.5)
        self.assertIsNone(report.to_dict()['per_image'][1]['nme'])

    def test_errors(self):
        with self.assertRaises(EmptyInput):
            ced_curve([])
        with self.assertRaises(EmptyInput):
            failure_rate([])
        with self.assertRaises(InvalidConfig):
            ced_curve([0.01], steps=1)


class TestReportFiles(unittest.TestCase):
    """报告输出测试"""

    def test_evaluate_and_files(self):
        report = evaluate([0.01, 0.03, 0.05, 0.1], ['a', 'b', 'c', 'd'], steps=101, label='demo')
        data = report.to_dict()
        self.assertEqual(data['count'], 4)
        self.assertEqual(data['failure_rate'], 0.25)
        self.assertEqual(data['steps'], 101)
        with tempfile.TemporaryDirectory() as tmp:
            csv_path = save_ced_csv(report.curve, Path(tmp) / 'ced.csv')
            loaded = load_ced_csv(csv_path)
            np.testing.assert_allclose(loaded.fractions, report.curve.fractions, atol=1e-8)
            svg = plot_ced([('demo', report.curve), ('again', loaded)], Path(tmp) / 'ced.svg')
            self.assertIn('<svg', svg.read_text(encoding='utf-8'))

    def test_plot_requires_curve(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(EmptyInput):
                plot_ced([], Path(tmp) / 'ced.svg')

    def test_infinite_mean_serializes_as_null(self):
        data = evaluate([0.01, float('inf')], ['a', 'b']).to_dict()
        self.assertIsNone(data['mean_nme'])
        self.assertEqual(data['mean_nme_finite'], 0.01)
        text = json.dumps(data, allow_nan=False)
        self.assertIsNone(json.loads(text)['mean_nme'])

    def test_library_logs_below_info(self):
        """评估与绘图只输出调试日志，汇总由命令行输出"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertLogs('landmark_toolkit.landmark_evaluation', level='DEBUG') as cm:
                report = evaluate([0.01, 0.05], steps=11)
                plot_ced([('demo', report.curve)], Path(tmp) / 'ced.svg')
        self.assertTrue(cm.records)
        self.assertTrue(all(record.levelno < logging.INFO for record in cm.records))


if __name__ == '__main__':
    unittest.main(verbosity=2)
