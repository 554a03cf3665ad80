#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行与配置分层测试
"""

import contextlib
import io
import json
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# 添加当前目录到Python路径
sys.path.insert(0, str(Path(__file__).parent))

from landmark_augmentation import DEFAULT_EIGVAL, AugmentationConfig, save_pca_eigen
from landmark_cli import _augmentation_config, main
from landmark_errors import InvalidConfig
from landmark_io import load_landmarks, save_landmarks
from pipeline_config import PipelineConfig, load_config


def run_cli(*argv) -> int:
    """运行 CLI 并吞掉标准输出"""
    with contextlib.redirect_stdout(io.StringIO()):
        return main(list(argv))


class TestCLIWorkflow(unittest.TestCase):
    """demo → align → eval → ced-plot 全流程"""

    @classmethod
    def setUpClass(cls):
        print("\n🧪 通过命令行生成并评估演示数据集...")
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        demo = cls.root / 'demo'
        assert run_cli('demo', '--out', str(demo), '--count', '8') == 0
        cls.flip_map = str(demo / 'flip_map.txt')
        assert run_cli('--jobs', '2', 'align',
                       '--images', str(demo / 'images'),
                       '--detections', str(demo / 'detections.json'),
                       '--annotations', str(demo / 'annotations'),
                       '--flip-map', cls.flip_map,
                       '--out', str(cls.root / 'aligned'),
                       '--write-replay', str(cls.root / 'replay')) == 0

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_demo_outputs(self):
        demo = self.root / 'demo'
        self.assertEqual(len(list((demo / 'images').glob('*.ppm'))), 8)
        self.assertTrue((demo / 'detections.json').exists())
        self.assertTrue((self.root / 'aligned' / 'face_0000.tform.json').exists())
        self.assertTrue((self.root / 'replay' / 'face_0000.flip.hms').exists())

    def test_eval_replay(self):
        out = self.root / 'eval'
        code = run_cli('eval', '--aligned', str(self.root / 'aligned'), '--out', str(out),
                       '--runner', 'replay', '--replay-dir', str(self.root / 'replay'),
                       '--flip-map', self.flip_map)
        self.assertEqual(code, 0)
        with open(out / 'metrics_report.json', 'r', encoding='utf-8') as f:
            report = json.load(f)
        self.assertGreaterEqual(report['auc'], 0.999)
        self.assertEqual(report['failure_rate'], 0.0)
        self.assertIn('timestamp', report)

        svg = self.root / 'ced.svg'
        self.assertEqual(run_cli('ced-plot', str(out / 'ced.csv'), '--out', str(svg),
                                 '--labels', 'replay'), 0)
        self.assertIn('<svg', svg.read_text(encoding='utf-8'))
        print("✅ 命令行评估通过")

    def test_infer(self):
        out = self.root / 'infer'
        code = run_cli('infer', '--aligned', str(self.root / 'aligned'), '--out', str(out),
                       '--replay-dir', str(self.root / 'replay'), '--flip-map', self.flip_map)
        self.assertEqual(code, 0)
        self.assertEqual(len(list(out.glob('*.csv'))), 8)

    def test_augment_seeded(self):
        aligned = self.root / 'aligned'
        outputs = []
        for name in ('aug_a', 'aug_b'):
            code = run_cli('--seed', '7', 'augment',
                           '--image', str(aligned / 'face_0002.ppm'),
                           '--landmarks', str(aligned / 'face_0002.pts.json'),
                           '--flip-map', self.flip_map, '--count', '3',
                           '--out', str(self.root / name))
            self.assertEqual(code, 0)
            outputs.append(self.root / name)
        for index in range(3):
            first = (outputs[0] / f"aug_{index:04d}.ppm").read_bytes()
            second = (outputs[1] / f"aug_{index:04d}.ppm").read_bytes()
            self.assertEqual(first, second)
        self.assertTrue((outputs[0] / 'augment_report.json').exists())

    def test_augment_pca_eigen_copy(self):
        """--pca-eigen 只作用于本次增强，不改动配置里的特征对"""
        eigval = np.array([0.3, 0.02, 0.001])
        eigen = save_pca_eigen(self.root / 'eigen.json', eigval, np.eye(3))
        cfg = PipelineConfig()
        aug_cfg = _augmentation_config(cfg, str(eigen))
        self.assertEqual(aug_cfg.eigval, eigval.tolist())
        self.assertEqual(cfg.augmentation.eigval, DEFAULT_EIGVAL.tolist())
        self.assertIs(_augmentation_config(cfg), cfg.augmentation)

        aligned = self.root / 'aligned'
        out = self.root / 'aug_pca'
        code = run_cli('augment', '--image', str(aligned / 'face_0001.ppm'),
                       '--landmarks', str(aligned / 'face_0001.pts.json'),
                       '--flip-map', self.flip_map, '--count', '2',
                       '--pca-eigen', str(eigen), '--out', str(out))
        self.assertEqual(code, 0)
        with open(out / 'augment_report.json', 'r', encoding='utf-8') as f:
            report = json.load(f)
        self.assertEqual(report['config']['eigval'], eigval.tolist())
        self.assertEqual(AugmentationConfig().eigval, DEFAULT_EIGVAL.tolist())

    def test_missing_replay_dir(self):
        code = run_cli('eval', '--aligned', str(self.root / 'aligned'),
                       '--out', str(self.root / 'bad'), '--flip-map', self.flip_map)
        self.assertEqual(code, 1)


def report_without_timestamp(path: Path, *drop: str) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    for key in ('timestamp',) + drop:
        data.pop(key, None)
    return data


def tree_bytes(root: Path, skip: tuple = ()) -> dict:
    """目录下除 skip 之外所有文件的相对路径 → 字节内容"""
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob('*')) if p.is_file() and p.name not in skip}


class TestJobsInvariance(unittest.TestCase):
    """--jobs 1 与 --jobs 4 的输出完全一致"""

    @classmethod
    def setUpClass(cls):
        print("\n🧪 比较不同工作线程数的输出...")
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.demo = cls.root / 'demo'
        assert run_cli('demo', '--out', str(cls.demo), '--count', '8',
                       '--drop-detections', '1') == 0
        cls.flip_map = str(cls.demo / 'flip_map.txt')
        for jobs in ('1', '4'):
            assert run_cli('--jobs', jobs, 'align',
                           '--images', str(cls.demo / 'images'),
                           '--detections', str(cls.demo / 'detections.json'),
                           '--annotations', str(cls.demo / 'annotations'),
                           '--flip-map', cls.flip_map,
                           '--out', str(cls.root / f'aligned_{jobs}'),
                           '--write-replay', str(cls.root / f'replay_{jobs}')) == 0

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_align(self):
        first, second = self.root / 'aligned_1', self.root / 'aligned_4'
        files = tree_bytes(first, skip=('alignment_report.json',))
        self.assertIn('skipped.txt', files)
        self.assertEqual(files, tree_bytes(second, skip=('alignment_report.json',)))
        self.assertEqual(report_without_timestamp(first / 'alignment_report.json'),
                         report_without_timestamp(second / 'alignment_report.json'))
        self.assertEqual(tree_bytes(self.root / 'replay_1'), tree_bytes(self.root / 'replay_4'))

    def test_augment(self):
        aligned = self.root / 'aligned_1'
        outputs = []
        for jobs in ('1', '4'):
            out = self.root / f'augment_{jobs}'
            self.assertEqual(run_cli('--seed', '11', '--jobs', jobs, 'augment',
                                     '--image', str(aligned / 'face_0003.ppm'),
                                     '--landmarks', str(aligned / 'face_0003.pts.json'),
                                     '--flip-map', self.flip_map, '--count', '6',
                                     '--out', str(out)), 0)
            outputs.append(out)
        files = tree_bytes(outputs[0], skip=('augment_report.json',))
        self.assertEqual(len(files), 12)
        self.assertEqual(files, tree_bytes(outputs[1], skip=('augment_report.json',)))
        self.assertEqual(report_without_timestamp(outputs[0] / 'augment_report.json'),
                         report_without_timestamp(outputs[1] / 'augment_report.json'))

    def test_eval(self):
        config = self.root / 'small_head.json'
        config.write_text(json.dumps({'channels': 16, 'strategy': 'SSSS'}), encoding='utf-8')
        for runner in ('replay', 'head'):
            outputs = []
            for jobs in ('1', '4'):
                out = self.root / f'eval_{runner}_{jobs}'
                self.assertEqual(run_cli('--config', str(config), '--jobs', jobs, 'eval',
                                         '--aligned', str(self.root / 'aligned_1'),
                                         '--out', str(out), '--runner', runner,
                                         '--replay-dir', str(self.root / 'replay_1'),
                                         '--flip-map', self.flip_map, '--count-skipped'), 0)
                outputs.append(out)
            self.assertEqual((outputs[0] / 'ced.csv').read_bytes(),
                             (outputs[1] / 'ced.csv').read_bytes(), runner)
            first = report_without_timestamp(outputs[0] / 'metrics_report.json', 'config')
            self.assertEqual(first['count'], 8)
            self.assertEqual(first, report_without_timestamp(outputs[1] / 'metrics_report.json',
                                                             'config'), runner)
        print("✅ 不同线程数输出一致")


class TestCLICommands(unittest.TestCase):
    """单独子命令测试"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_encode_decode(self):
        points = np.array([[60.5, 80.25], [130.0, 81.0], [96.0, 110.5], [70.0, 140.0],
                           [122.75, 141.0]])
        lmk = save_landmarks(self.root / 'points.csv', points)
        hms = self.root / 'points.hms'
        self.assertEqual(run_cli('encode', '--landmarks', str(lmk), '--out', str(hms)), 0)
        decoded = self.root / 'decoded.csv'
        self.assertEqual(run_cli('decode', '--heatmaps', str(hms), '--out', str(decoded),
                                 '--method', 'gaussian'), 0)
        np.testing.assert_allclose(load_landmarks(decoded), points, atol=1e-3)

    def test_plan_json(self):
        out = self.root / 'plan.json'
        code = run_cli('plan', '--strategies', 'SSSS,DDDD', '--report', 'json', '--out', str(out))
        self.assertEqual(code, 0)
        with open(out, 'r', encoding='utf-8') as f:
            data = json.load(f)
        self.assertEqual([r['strategy'] for r in data['reports']], ['SSSS', 'DDDD'])
        self.assertEqual(data['reports'][1]['head_macs'], 3468165120)

    def test_plan_reference(self):
        out = self.root / 'plan.csv'
        code = run_cli('plan', '--preset', 'intermittent', '--compare-reference', 'intermittent',
                       '--out', str(out))
        self.assertEqual(code, 0)
        header = out.read_text(encoding='utf-8').splitlines()[0]
        self.assertTrue(header.startswith('strategy,channels'))
        with open(out.with_suffix('.agreement.json'), 'r', encoding='utf-8') as f:
            agreement = json.load(f)
        self.assertAlmostEqual(agreement['tau'], 49 / 55, places=9)

    def test_plan_verify(self):
        code = run_cli('plan', '--strategies', 'SD', '--channels', '16', '--backbone', '32x3x3',
                       '--verify')
        self.assertEqual(code, 0)

    def test_invalid_strategy(self):
        self.assertEqual(run_cli('plan', '--strategies', 'SXD'), 1)


class TestPipelineConfig(unittest.TestCase):
    """配置分层测试"""

    def test_defaults_valid(self):
        cfg = PipelineConfig().validate()
        self.assertEqual(cfg.stride, 2)
        self.assertEqual(cfg.strategy_spec().output_size, (96, 96))

    def test_unknown_key(self):
        with self.assertRaises(InvalidConfig):
            PipelineConfig.from_dict({'sigmaa': 2.0})

    def test_bad_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'config.json'
            path.write_text('{not json', encoding='utf-8')
            with self.assertRaises(InvalidConfig):
                PipelineConfig.from_json(path)

    def test_layering(self):
        """文件 < 环境变量 < 显式覆盖"""
        with tempfile.TemporaryDirectory() as tmp:
            path = PipelineConfig(sigma=2.0, seed=3, decoder='gradient').save(Path(tmp) / 'c.json')
            env = {'LANDMARK_SIGMA': '2.5', 'LANDMARK_TTA': 'false',
                   'LANDMARK_BACKBONE': '1280x6x6'}
            cfg = load_config(path, env, seed=None, decoder='argmax')
        self.assertEqual(cfg.sigma, 2.5)
        self.assertFalse(cfg.tta)
        self.assertEqual(cfg.backbone, (1280, 6, 6))
        self.assertEqual(cfg.seed, 3)
        self.assertEqual(cfg.decoder, 'argmax')

    def test_bad_env_value(self):
        with self.assertRaises(InvalidConfig):
            PipelineConfig().with_env({'LANDMARK_JOBS': 'many'})

    def test_validation(self):
        with self.assertRaises(InvalidConfig):
            PipelineConfig(input_size=190).validate()
        with self.assertRaises(InvalidConfig):
            PipelineConfig(naive_order=[0, 1, 2, 3, 3]).validate()
        with self.assertRaises(InvalidConfig):
            PipelineConfig(num_landmarks=106).load_flip_map()

    def test_updated_ignores_none(self):
        cfg = PipelineConfig(sigma=2.0)
        self.assertEqual(cfg.updated(sigma=None).sigma, 2.0)
        self.assertEqual(cfg.updated(sigma=3.0).sigma, 3.0)


if __name__ == '__main__':
    unittest.main(verbosity=2)
