#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
人脸关键点工具命令行入口

子命令: align, encode, decode, augment, plan, infer, eval, ced-plot, demo
"""

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from face_geometry import SimilarityTransform
from head_planner import (CostModelConfig, build_head, estimate_cost, init_weights,
                          parse_backbone, parse_strategy, preset_specs, rank_agreement,
                          rank_strategies, run_head)
from heatmap_codec import (HeatmapStack, decode, encode, to_heatmap_frame, to_image_frame)
from landmark_augmentation import AugmentationConfig, augment_sample, item_seed, load_pca_eigen
from landmark_errors import LandmarkError
from landmark_evaluation import load_ced_csv, plot_ced, save_ced_csv
from landmark_io import (load_landmarks, load_transform, read_heatmap_stack, read_image,
                         save_landmarks, save_report, write_heatmap_stack, write_image)
from landmark_pipeline import (FileReplayRunner, HeadRunner, align_dataset, end_to_end_eval,
                               infer_dataset, load_aligned_dataset, load_detections,
                               write_replay_stacks)
from log_utils import get_logger, setup_logging
from pipeline_config import PipelineConfig, load_config

logger = get_logger('landmark_cli')

PLAN_COLUMNS = ('strategy', 'channels', 'backbone_out', 'output_shape', 'head_macs',
                'head_flops', 'total_flops', 'gflops', 'params', 'param_mb',
                'peak_activation_elements')


def _config_from_args(args) -> PipelineConfig:
    overrides = {
        'seed': args.seed,
        'jobs': args.jobs,
        'template_path': getattr(args, 'template', None),
        'flip_map_path': getattr(args, 'flip_map', None),
        'decoder': getattr(args, 'method', None),
        'sigma': getattr(args, 'sigma', None),
        'strategy': getattr(args, 'strategy', None),
        'weights_dir': getattr(args, 'weights', None),
    }
    if getattr(args, 'no_tta', False):
        overrides['tta'] = False
    if getattr(args, 'stack_heatmaps', False):
        overrides['tta_stack_heatmaps'] = True
    return load_config(args.config, **overrides)


def _make_runner(args, cfg: PipelineConfig):
    if args.runner == 'replay':
        if not args.replay_dir:
            raise LandmarkError("回放运行器需要 --replay-dir")
        return FileReplayRunner(args.replay_dir, stride=cfg.input_size / cfg.heatmap_size)
    return HeadRunner(cfg)


def cmd_align(args) -> int:
    cfg = _config_from_args(args)
    detections = load_detections(args.detections, cfg.naive_order)
    result = align_dataset(args.images, detections, cfg.load_template(), args.out, cfg,
                           annotations_dir=args.annotations)
    if args.write_replay:
        write_replay_stacks(result.samples, args.write_replay, cfg, cfg.load_flip_map())
    summary = result.report['summary']
    print(f"对齐完成: {summary['aligned']} 张, 跳过 {summary['skipped']} 张 → {args.out}")
    return 0


def cmd_encode(args) -> int:
    cfg = _config_from_args(args)
    landmarks = load_landmarks(args.landmarks)
    stride = cfg.input_size / cfg.heatmap_size
    points = landmarks if args.heatmap_frame else to_heatmap_frame(landmarks, stride)
    stack = encode(points, cfg.heatmap_size, cfg.heatmap_size, cfg.gaussian_params(), stride)
    write_heatmap_stack(args.out, stack.values)
    if stack.meta['out_of_frame']:
        logger.warning(f"{len(stack.meta['out_of_frame'])} 个关键点超出热图范围")
    print(f"已写出热图 {stack.values.shape} → {args.out}")
    return 0


def cmd_decode(args) -> int:
    cfg = _config_from_args(args)
    stride = cfg.input_size / cfg.heatmap_size
    stack = HeatmapStack(read_heatmap_stack(args.heatmaps), stride=stride)
    points = decode(stack, cfg.decoder, cfg.gaussian_params(), cfg.gradient_c)
    transform = None
    if args.transform:
        forward, _ = load_transform(args.transform)
        transform = SimilarityTransform.from_list(forward)
    coords = to_image_frame(points, stride, transform)
    save_landmarks(args.out, coords)
    flagged = sum(1 for p in points if p.flag != 'ok')
    if flagged:
        logger.info(f"{flagged} 个关键点使用了退化解码")
    print(f"已解码 {len(points)} 个关键点 → {args.out}")
    return 0


def _augmentation_config(cfg: PipelineConfig,
                         pca_eigen: Optional[str] = None) -> AugmentationConfig:
    """增强配置副本，给定 --pca-eigen 时替换特征对"""
    if not pca_eigen:
        return cfg.augmentation
    eigval, eigvec = load_pca_eigen(pca_eigen)
    return replace(cfg.augmentation, eigval=eigval.tolist(), eigvec=eigvec.tolist())


def cmd_augment(args) -> int:
    cfg = _config_from_args(args)
    aug_cfg = _augmentation_config(cfg, args.pca_eigen)
    image = read_image(args.image)
    landmarks = load_landmarks(args.landmarks)
    if len(landmarks) != cfg.num_landmarks:
        cfg = cfg.updated(num_landmarks=len(landmarks))
    flip_map = cfg.load_flip_map()
    out_dir = Path(args.out)

    def task(index: int):
        img, pts, info = augment_sample(image, landmarks, flip_map, aug_cfg,
                                        item_seed(cfg.seed, index))
        write_image(out_dir / f"aug_{index:04d}.{cfg.image_format}", img)
        save_landmarks(out_dir / f"aug_{index:04d}.csv", pts)
        return {'index': index, **info}

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        records = list(tqdm(pool.map(task, range(args.count)), total=args.count, desc="数据增强"))
    save_report({'seed': cfg.seed, 'count': args.count, 'config': aug_cfg.to_dict(),
                 'samples': records}, out_dir / 'augment_report.json')
    print(f"已生成 {args.count} 个增强样本 → {out_dir}")
    return 0


def _plan_specs(args, cfg: PipelineConfig):
    if args.preset:
        return preset_specs(args.preset)
    backbone = parse_backbone(args.backbone) if args.backbone else cfg.backbone
    channels = args.channels or cfg.channels
    texts = args.strategies.split(',') if args.strategies else [cfg.strategy]
    return [parse_strategy(t, channels, backbone) for t in texts if t.strip()]


def cmd_plan(args) -> int:
    cfg = _config_from_args(args)
    cost_cfg = CostModelConfig(
        deconv_kernel=args.deconv_kernel or cfg.deconv_kernel,
        shuffle_conv_kernel=args.shuffle_kernel or cfg.shuffle_conv_kernel,
        macs_per_flop=args.macs_per_flop,
        count_elementwise=args.count_elementwise,
        backbone_flops=args.backbone_flops,
    )
    specs = _plan_specs(args, cfg)
    reports = rank_strategies(specs, cost_cfg, cfg.num_landmarks)

    if args.verify:
        for spec in specs:
            graph = build_head(spec, cfg.num_landmarks, cost_cfg)
            weights = init_weights(graph, cfg.seed)
            features = np.random.default_rng(cfg.seed).standard_normal(graph.input_shape)
            _, counter = run_head(graph, weights, features)
            analytic = estimate_cost(graph, cost_cfg).head_macs
            status = '一致' if counter.macs == analytic else '不一致'
            print(f"{spec.text}: 执行计数 {counter.macs} / 解析 {analytic} → {status}")

    rows = [r.to_dict() for r in reports]
    if args.report == 'json':
        text = json.dumps({'cost_model': cost_cfg.__dict__, 'reports': rows},
                          indent=2, ensure_ascii=False)
    else:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(PLAN_COLUMNS)
        for row in rows:
            writer.writerow(['x'.join(map(str, row[c])) if isinstance(row[c], list) else row[c]
                             for c in PLAN_COLUMNS])
        text = buffer.getvalue()

    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding='utf-8')
        print(f"计算量报告已保存: {args.out}")
    else:
        print(text)

    if args.compare_reference:
        agreement = rank_agreement(args.compare_reference, cost_cfg, cfg.num_landmarks)
        print(f"与 {args.compare_reference} 的 Kendall-tau = {agreement['tau']:.4f} "
              f"(最便宜 {agreement['cheapest']}, 最贵 {agreement['most_expensive']})")
        if not agreement['passed']:
            print("排序差异:")
            for row in agreement['discrepancies']:
                print(f"  {row['strategy']}: 规划名次 {row['planned_rank']}, "
                      f"参考名次 {row['reference_rank']}")
        if args.out:
            save_report(agreement, Path(args.out).with_suffix('.agreement.json'))
    return 0


def cmd_infer(args) -> int:
    cfg = _config_from_args(args)
    samples, _ = load_aligned_dataset(args.aligned)
    runner = _make_runner(args, cfg)
    written = infer_dataset(samples, runner, cfg.load_flip_map(), cfg, args.out)
    print(f"已预测 {len(written)} 张图片 → {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    samples, skipped = load_aligned_dataset(args.aligned)
    runner = _make_runner(args, cfg)
    report = end_to_end_eval(samples, runner, cfg, cfg.load_flip_map(),
                             skipped_ids=skipped if args.count_skipped else ())
    out_dir = Path(args.out)
    save_report({**report.to_dict(), 'config': cfg.to_dict()}, out_dir / 'metrics_report.json')
    save_ced_csv(report.curve, out_dir / 'ced.csv')
    logger.info(f"评估完成: {report.count} 张, AUC={report.auc:.4f}, "
                f"失败率={report.failure_rate:.4f}, 平均NME={report.mean_nme:.5f}")
    print(f"AUC@{report.max_threshold} = {report.auc:.4f}, 失败率 = {report.failure_rate:.4f}, "
          f"平均 NME = {report.mean_nme:.5f}")
    return 0


def cmd_ced_plot(args) -> int:
    labels = args.labels.split(',') if args.labels else [Path(p).parent.name or Path(p).stem
                                                         for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise LandmarkError("--labels 数量与输入文件数量不符")
    curves = [(label, load_ced_csv(path)) for label, path in zip(labels, args.inputs)]
    plot_ced(curves, args.out, args.title)
    print(f"CED 曲线已保存: {args.out}")
    return 0


def cmd_demo(args) -> int:
    from demo_data_generator import DemoDataGenerator

    generator = DemoDataGenerator(args.landmarks, seed=args.seed or 0)
    paths = generator.write_dataset(args.out, args.count, drop_detections=args.drop_detections)
    for key, path in paths.items():
        print(f"✅ {key}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='人脸关键点定位工具 - 对齐、热图编解码、上采样头规划与评估')
    parser.add_argument('--config', help='JSON 配置文件')
    parser.add_argument('--seed', type=int, help='全局随机种子')
    parser.add_argument('--jobs', type=int, help='并行工作线程数')
    parser.add_argument('--verbose', action='store_true', help='输出调试日志')
    parser.add_argument('--log-file', help='日志文件路径')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('align', help='按五点检测结果对齐数据集')
    p.add_argument('--images', required=True, help='原图目录')
    p.add_argument('--detections', required=True, help='检测器输出 JSON')
    p.add_argument('--out', required=True, help='对齐输出目录')
    p.add_argument('--annotations', help='真值标注目录（JD 文本或 JSON）')
    p.add_argument('--template', help='参考模板 JSON')
    p.add_argument('--flip-map', help='翻转映射文件')
    p.add_argument('--write-replay', help='把对齐后的真值编码为回放热图写到该目录')
    p.set_defaults(func=cmd_align)

    p = sub.add_parser('encode', help='关键点 → 热图 (HMS1)')
    p.add_argument('--landmarks', required=True, help='关键点文件 (.csv/.json/JD 文本)')
    p.add_argument('--out', required=True, help='输出 .hms 文件')
    p.add_argument('--sigma', type=float, help='高斯 sigma（热图像素）')
    p.add_argument('--heatmap-frame', action='store_true', help='输入坐标已在热图坐标系')
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser('decode', help='热图 (HMS1) → 关键点')
    p.add_argument('--heatmaps', required=True, help='输入 .hms 文件')
    p.add_argument('--out', required=True, help='输出关键点文件 (.csv/.json)')
    p.add_argument('--method', choices=['argmax', 'gradient', 'gaussian'], help='解码方法')
    p.add_argument('--transform', help='对齐变换 JSON，给定时输出原图坐标')
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser('augment', help='预览训练数据增强')
    p.add_argument('--image', required=True, help='对齐后的图片')
    p.add_argument('--landmarks', required=True, help='对齐坐标系中的关键点文件')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--count', type=int, default=8, help='生成数量 (默认: 8)')
    p.add_argument('--flip-map', help='翻转映射文件')
    p.add_argument('--pca-eigen', help='PCA 特征值/特征向量 JSON')
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser('plan', help='估算上采样策略的计算量并排序')
    p.add_argument('--strategies', help='逗号分隔的策略串，如 SSSS,DDDD')
    p.add_argument('--preset', choices=['baseline', 'baseline-128', 'shuffle', 'intermittent',
                                        'upsized', 'all'], help='预设策略组')
    p.add_argument('--channels', type=int, help='每阶段滤波器数')
    p.add_argument('--backbone', help='骨干输出形状，如 320x6x6')
    p.add_argument('--deconv-kernel', type=int, help='转置卷积核大小（偶数）')
    p.add_argument('--shuffle-kernel', type=int, help='重排块卷积核大小（奇数）')
    p.add_argument('--macs-per-flop', type=int, choices=[1, 2], default=1, help='每次乘加计几个 FLOP')
    p.add_argument('--count-elementwise', action='store_true', help='逐元素运算计入 FLOPs')
    p.add_argument('--backbone-flops', type=int, default=0, help='骨干网络固定计算量')
    p.add_argument('--report', choices=['csv', 'json'], default='csv', help='报告格式')
    p.add_argument('--out', help='报告输出文件（默认打印）')
    p.add_argument('--compare-reference', choices=['intermittent', 'upsized'],
                   help='与已发表的 GFLOPS 列比较排序一致性')
    p.add_argument('--verify', action='store_true', help='执行上采样头并核对乘加计数')
    p.set_defaults(func=cmd_plan)

    for name, func, help_text in (('infer', cmd_infer, '对对齐数据集预测关键点'),
                                  ('eval', cmd_eval, '端到端评估 NME / CED / AUC')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--aligned', required=True, help='align 生成的目录')
        p.add_argument('--out', required=True, help='输出目录')
        p.add_argument('--runner', choices=['head', 'replay'], default='replay', help='模型运行器')
        p.add_argument('--replay-dir', help='回放热图目录')
        p.add_argument('--weights', help='上采样头权重目录 (TNS1)')
        p.add_argument('--strategy', help='上采样策略串')
        p.add_argument('--method', choices=['argmax', 'gradient', 'gaussian'], help='解码方法')
        p.add_argument('--flip-map', help='翻转映射文件')
        p.add_argument('--no-tta', action='store_true', help='关闭翻转测试时平均')
        p.add_argument('--stack-heatmaps', action='store_true', help='平均热图后再解码')
        if name == 'eval':
            p.add_argument('--count-skipped', action='store_true',
                           help='对齐时跳过的图片计为失败')
        p.set_defaults(func=func)

    p = sub.add_parser('ced-plot', help='把 CED CSV 画成 SVG')
    p.add_argument('inputs', nargs='+', help='ced.csv 文件')
    p.add_argument('--out', required=True, help='输出 SVG')
    p.add_argument('--labels', help='逗号分隔的曲线名称')
    p.add_argument('--title', help='图标题')
    p.set_defaults(func=cmd_ced_plot)

    p = sub.add_parser('demo', help='生成合成演示数据集')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--count', type=int, default=50, help='图片数量 (默认: 50)')
    p.add_argument('--landmarks', type=int, default=106, help='关键点数 (默认: 106)')
    p.add_argument('--drop-detections', type=int, default=0, help='去掉前 N 张图的检测结果')
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_file, logging.DEBUG if args.verbose else logging.INFO)

    try:
        return args.func(args)
    except (LandmarkError, OSError) as e:
        logger.debug("命令执行失败", exc_info=True)
        print(f"错误: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
