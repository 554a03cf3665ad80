#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
上采样头规划器 - 解析 S/D 策略串、构建可执行的上采样头、估算计算量并排序

S 阶段: conv(k×k) + BN + ReLU + pixel_shuffle(2)
D 阶段: deconv(k, stride 2) + BN + ReLU
最后一阶段为 D（或没有阶段）时追加 1×1 卷积输出 K 张热图；
最后一阶段为 S 时其卷积直接输出 4·K 个通道，重排后即为热图。
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import kendalltau

from heatmap_codec import HeatmapStack
from landmark_errors import InvalidConfig, InvalidStrategy, ShapeMismatch
from landmark_io import read_tensor, write_tensor
from log_utils import get_logger
from tensor_ops import (OpCounter, batchnorm_inference, conv2d, deconv2d,
                        pixel_shuffle, relu)

logger = get_logger('head_planner')

STAGE_SHUFFLE = 'S'
STAGE_DECONV = 'D'
MAX_STAGES = 6
DEFAULT_CHANNELS = 256
DEFAULT_BACKBONE = (320, 6, 6)
BYTES_PER_PARAM = 4

Shape = Tuple[int, int, int]


@dataclass(frozen=True)
class StrategySpec:
    """上采样策略：阶段序列 + 每阶段滤波器数 + 骨干网络输出形状"""

    stages: Tuple[str, ...]
    channels: int = DEFAULT_CHANNELS
    backbone_out: Shape = DEFAULT_BACKBONE

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, 'stages', stages)
        object.__setattr__(self, 'backbone_out', tuple(int(v) for v in self.backbone_out))
        if len(stages) > MAX_STAGES:
            raise InvalidStrategy(f"阶段数不能超过 {MAX_STAGES}，实际为 {len(stages)}")
        for stage in stages:
            if stage not in (STAGE_SHUFFLE, STAGE_DECONV):
                raise InvalidStrategy(f"未知阶段类型: {stage!r}")
        if self.channels <= 0 or self.channels % 4 != 0:
            raise InvalidStrategy(f"滤波器数必须为 4 的正整数倍，实际为 {self.channels}")
        if len(self.backbone_out) != 3 or min(self.backbone_out) <= 0:
            raise InvalidStrategy(f"骨干输出形状非法: {self.backbone_out}")

    @classmethod
    def direct(cls, channels: int = DEFAULT_CHANNELS,
               backbone_out: Shape = DEFAULT_BACKBONE) -> 'StrategySpec':
        """无上采样阶段，骨干特征直接经 1×1 卷积输出热图"""
        return cls((), channels, backbone_out)

    @property
    def text(self) -> str:
        return ''.join(self.stages) or '-'

    @property
    def output_size(self) -> Tuple[int, int]:
        _, h, w = self.backbone_out
        factor = 2 ** len(self.stages)
        return h * factor, w * factor


def parse_backbone(text: str) -> Shape:
    """解析 "320x6x6" 形式的骨干输出形状"""
    try:
        dims = tuple(int(v) for v in text.lower().split('x'))
    except ValueError as e:
        raise InvalidConfig(f"骨干形状无法解析: {text}") from e
    if len(dims) != 3 or min(dims) <= 0:
        raise InvalidConfig(f"骨干形状应为 CxHxW: {text}")
    return dims


def parse_strategy(text: str, channels: int = DEFAULT_CHANNELS,
                   backbone_out: Shape = DEFAULT_BACKBONE) -> StrategySpec:
    """解析策略串（大小写不敏感），如 "SDSD" """
    if not text:
        raise InvalidStrategy("策略串为空")
    normalized = text.strip().upper()
    invalid = sorted({ch for ch in normalized if ch not in (STAGE_SHUFFLE, STAGE_DECONV)})
    if not normalized or invalid:
        raise InvalidStrategy(f"策略串 {text!r} 含非法字符 {invalid}，只允许 S/D")
    return StrategySpec(tuple(normalized), channels, backbone_out)


@dataclass(frozen=True)
class CostModelConfig:
    """计算量计数约定"""

    deconv_kernel: int = 4
    shuffle_conv_kernel: int = 3
    macs_per_flop: int = 1
    count_elementwise: bool = False
    backbone_flops: int = 0

    def __post_init__(self):
        if self.deconv_kernel < 2 or self.deconv_kernel % 2 != 0:
            raise InvalidConfig(f"转置卷积核必须为 ≥2 的偶数，实际为 {self.deconv_kernel}")
        if self.shuffle_conv_kernel < 1 or self.shuffle_conv_kernel % 2 != 1:
            raise InvalidConfig(f"重排卷积核必须为正奇数，实际为 {self.shuffle_conv_kernel}")
        if self.macs_per_flop not in (1, 2):
            raise InvalidConfig(f"macs_per_flop 只能为 1 或 2，实际为 {self.macs_per_flop}")
        if self.backbone_flops < 0:
            raise InvalidConfig("backbone_flops 不能为负")

    @property
    def deconv_pad(self) -> int:
        return (self.deconv_kernel - 2) // 2


@dataclass(frozen=True)
class LayerSpec:
    """上采样头中的单个算子"""

    name: str
    op: str
    stage: int
    in_shape: Shape
    out_shape: Shape
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = False

    @property
    def weight_shape(self) -> Optional[Tuple[int, ...]]:
        c_in, c_out = self.in_shape[0], self.out_shape[0]
        if self.op == 'conv':
            return (c_out, c_in, self.kernel, self.kernel)
        if self.op == 'deconv':
            return (c_in, c_out, self.kernel, self.kernel)
        return None

    @property
    def macs(self) -> int:
        if self.op == 'conv':
            _, h_out, w_out = self.out_shape
            return self.out_shape[0] * self.in_shape[0] * self.kernel ** 2 * h_out * w_out
        if self.op == 'deconv':
            _, h_in, w_in = self.in_shape
            return self.in_shape[0] * self.out_shape[0] * self.kernel ** 2 * h_in * w_in
        return 0

    @property
    def elementwise(self) -> int:
        size = int(np.prod(self.out_shape))
        if self.op == 'bn':
            return 2 * size
        if self.op == 'relu':
            return size
        if self.op in ('conv', 'deconv') and self.bias:
            return size
        return 0

    @property
    def params(self) -> int:
        shape = self.weight_shape
        if shape is not None:
            count = int(np.prod(shape))
            if self.bias:
                count += self.out_shape[0]
            return count
        if self.op == 'bn':
            # gamma, beta, running mean, running var
            return 4 * self.out_shape[0]
        return 0

    @property
    def activation_elements(self) -> int:
        return int(np.prod(self.in_shape)) + int(np.prod(self.out_shape))


@dataclass
class HeadGraph:
    spec: StrategySpec
    num_landmarks: int
    cost_config: CostModelConfig
    layers: List[LayerSpec] = field(default_factory=list)

    @property
    def input_shape(self) -> Shape:
        return self.spec.backbone_out

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].out_shape if self.layers else self.input_shape

    def stage_layers(self) -> Dict[int, List[LayerSpec]]:
        groups: Dict[int, List[LayerSpec]] = {}
        for layer in self.layers:
            groups.setdefault(layer.stage, []).append(layer)
        return groups


def _stage_label(spec: StrategySpec, stage: int) -> str:
    if stage < len(spec.stages):
        return f"{stage}:{spec.stages[stage]}"
    return f"{stage}:final"


def build_head(spec: StrategySpec, num_landmarks: int = 106,
               cfg: Optional[CostModelConfig] = None) -> HeadGraph:
    """按策略构建上采样头的算子序列"""
    if num_landmarks <= 0:
        raise InvalidConfig(f"关键点数必须为正，实际为 {num_landmarks}")
    cfg = cfg or CostModelConfig()
    graph = HeadGraph(spec, num_landmarks, cfg)
    shape = spec.backbone_out
    last = len(spec.stages) - 1

    for i, stage in enumerate(spec.stages):
        c_in, h, w = shape
        prefix = f"stage{i}"
        if stage == STAGE_DECONV:
            out = (spec.channels, 2 * h, 2 * w)
            graph.layers.append(LayerSpec(f"{prefix}.deconv", 'deconv', i, shape, out,
                                          kernel=cfg.deconv_kernel, stride=2,
                                          pad=cfg.deconv_pad))
        else:
            conv_out = 4 * num_landmarks if i == last else spec.channels
            out = (conv_out, h, w)
            graph.layers.append(LayerSpec(f"{prefix}.conv", 'conv', i, shape, out,
                                          kernel=cfg.shuffle_conv_kernel,
                                          pad=cfg.shuffle_conv_kernel // 2))
        graph.layers.append(LayerSpec(f"{prefix}.bn", 'bn', i, out, out))
        graph.layers.append(LayerSpec(f"{prefix}.relu", 'relu', i, out, out))
        if stage == STAGE_SHUFFLE:
            shuffled = (out[0] // 4, 2 * h, 2 * w)
            graph.layers.append(LayerSpec(f"{prefix}.shuffle", 'shuffle', i, out, shuffled))
            out = shuffled
        shape = out

    if not spec.stages or spec.stages[-1] == STAGE_DECONV:
        out = (num_landmarks, shape[1], shape[2])
        graph.layers.append(LayerSpec("final.conv", 'conv', len(spec.stages), shape, out,
                                      kernel=1, bias=True))

    logger.debug(f"构建上采样头 {spec.text}: {spec.backbone_out} → {graph.output_shape}")
    return graph


@dataclass(frozen=True)
class StageCost:
    label: str
    macs: int
    elementwise: int
    flops: int
    params: int
    activation_elements: int


@dataclass
class CostReport:
    """上采样头的计算量/参数量/激活内存报告"""

    strategy: str
    channels: int
    backbone_out: Shape
    output_shape: Shape
    stages: List[StageCost]
    backbone_flops: int = 0

    @property
    def head_macs(self) -> int:
        return sum(s.macs for s in self.stages)

    @property
    def head_elementwise(self) -> int:
        return sum(s.elementwise for s in self.stages)

    @property
    def head_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    @property
    def total_flops(self) -> int:
        return self.head_flops + self.backbone_flops

    @property
    def params(self) -> int:
        return sum(s.params for s in self.stages)

    @property
    def param_mb(self) -> float:
        return BYTES_PER_PARAM * self.params / 1e6

    @property
    def peak_activation_elements(self) -> int:
        return max((s.activation_elements for s in self.stages), default=0)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self) -> Dict:
        return {
            'strategy': self.strategy,
            'channels': self.channels,
            'backbone_out': list(self.backbone_out),
            'output_shape': list(self.output_shape),
            'head_macs': self.head_macs,
            'head_flops': self.head_flops,
            'backbone_flops': self.backbone_flops,
            'total_flops': self.total_flops,
            'gflops': self.gflops,
            'params': self.params,
            'param_mb': self.param_mb,
            'peak_activation_elements': self.peak_activation_elements,
            'stages': [s.__dict__ for s in self.stages],
        }


def estimate_cost(graph: HeadGraph, cfg: Optional[CostModelConfig] = None) -> CostReport:
    """按 conv/deconv 闭式公式估算每阶段的计算量与参数量"""
    cfg = cfg or graph.cost_config
    stages = []
    for stage, layers in sorted(graph.stage_layers().items()):
        macs = sum(layer.macs for layer in layers)
        elementwise = sum(layer.elementwise for layer in layers)
        flops = macs * cfg.macs_per_flop + (elementwise if cfg.count_elementwise else 0)
        stages.append(StageCost(
            label=_stage_label(graph.spec, stage),
            macs=macs,
            elementwise=elementwise,
            flops=flops,
            params=sum(layer.params for layer in layers),
            activation_elements=max(layer.activation_elements for layer in layers),
        ))
    return CostReport(graph.spec.text, graph.spec.channels, graph.spec.backbone_out,
                      graph.output_shape, stages, cfg.backbone_flops)


Weights = Dict[str, Dict[str, np.ndarray]]


def init_weights(graph: HeadGraph, seed: int = 0, mode: str = 'random') -> Weights:
    """
    生成上采样头权重

    mode='random': He 正态初始化 + 随机 BN 统计量（可复现）
    mode='zeros' : 卷积权重为 0，BN 为恒等变换
    """
    if mode not in ('random', 'zeros'):
        raise InvalidConfig(f"未知的权重初始化模式: {mode}")
    rng = np.random.default_rng(seed)
    weights: Weights = {}
    for layer in graph.layers:
        if layer.op in ('conv', 'deconv'):
            shape = layer.weight_shape
            fan_in = layer.in_shape[0] * layer.kernel ** 2
            if mode == 'zeros':
                w = np.zeros(shape, dtype=np.float32)
            else:
                w = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
            params = {'weight': w}
            if layer.bias:
                params['bias'] = np.zeros(layer.out_shape[0], dtype=np.float32)
            weights[layer.name] = params
        elif layer.op == 'bn':
            c = layer.out_shape[0]
            if mode == 'zeros':
                params = {'mean': np.zeros(c), 'var': np.ones(c),
                          'gamma': np.ones(c), 'beta': np.zeros(c)}
            else:
                params = {'mean': rng.normal(0.0, 0.1, c), 'var': rng.uniform(0.5, 1.5, c),
                          'gamma': rng.uniform(0.5, 1.5, c), 'beta': rng.normal(0.0, 0.1, c)}
            weights[layer.name] = {k: v.astype(np.float32) for k, v in params.items()}
    return weights


def save_weights(weights: Weights, directory: Union[str, Path]) -> List[Path]:
    """每个参数保存为 <层名>.<参数名>.tns"""
    directory = Path(directory)
    return [write_tensor(directory / f"{layer}.{name}.tns", value)
            for layer, params in weights.items() for name, value in params.items()]


def load_weights(graph: HeadGraph, directory: Union[str, Path]) -> Weights:
    """按图中的层名从目录读取权重"""
    directory = Path(directory)
    expected = init_weights(graph, mode='zeros')
    weights: Weights = {}
    for layer, params in expected.items():
        weights[layer] = {}
        for name, template in params.items():
            path = directory / f"{layer}.{name}.tns"
            if not path.exists():
                raise ShapeMismatch(f"缺少权重文件: {path}")
            value = read_tensor(path)
            if value.shape != template.shape:
                raise ShapeMismatch(f"权重 {layer}.{name} 形状 {value.shape} 与图 {template.shape} 不符")
            weights[layer][name] = value
    return weights


def _layer_params(weights: Weights, layer: LayerSpec) -> Dict[str, np.ndarray]:
    try:
        return weights[layer.name]
    except KeyError as e:
        raise ShapeMismatch(f"缺少层 {layer.name} 的权重") from e


def run_head(graph: HeadGraph, weights: Weights, x: np.ndarray,
             stride: float = 1.0) -> Tuple[HeatmapStack, OpCounter]:
    """执行上采样头并计数乘加，返回热图与计数器"""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != graph.input_shape:
        raise ShapeMismatch(f"输入形状 {x.shape} 与骨干输出 {graph.input_shape} 不符")
    counter = OpCounter()
    for layer in graph.layers:
        if layer.op == 'conv':
            params = _layer_params(weights, layer)
            if params['weight'].shape != layer.weight_shape:
                raise ShapeMismatch(f"层 {layer.name} 权重形状 {params['weight'].shape} "
                                    f"与图 {layer.weight_shape} 不符")
            x = conv2d(x, params['weight'], params.get('bias'), layer.stride, layer.pad, counter)
        elif layer.op == 'deconv':
            params = _layer_params(weights, layer)
            if params['weight'].shape != layer.weight_shape:
                raise ShapeMismatch(f"层 {layer.name} 权重形状 {params['weight'].shape} "
                                    f"与图 {layer.weight_shape} 不符")
            x = deconv2d(x, params['weight'], params.get('bias'), layer.stride, layer.pad, counter)
        elif layer.op == 'bn':
            p = _layer_params(weights, layer)
            x = batchnorm_inference(x, p['mean'], p['var'], p['gamma'], p['beta'], counter=counter)
        elif layer.op == 'relu':
            x = relu(x, counter)
        elif layer.op == 'shuffle':
            x = pixel_shuffle(x, 2, counter)
        if x.shape != layer.out_shape:
            raise ShapeMismatch(f"层 {layer.name} 输出 {x.shape}，预期 {layer.out_shape}")
    return HeatmapStack(x, stride=stride, meta={'strategy': graph.spec.text}), counter


def rank_strategies(specs: Sequence[StrategySpec], cfg: Optional[CostModelConfig] = None,
                    num_landmarks: int = 106) -> List[CostReport]:
    """按总计算量升序排序，计算量相同时按参数大小"""
    cfg = cfg or CostModelConfig()
    reports = [estimate_cost(build_head(spec, num_landmarks, cfg), cfg) for spec in specs]
    return sorted(reports, key=lambda r: (r.total_flops, r.param_mb))


# 已发表的上采样策略计算量 (GFLOPS)，含骨干网络
REFERENCE_GFLOPS = {
    'intermittent': {
        'backbone': (320, 6, 6),
        'channels': 256,
        'gflops': {
            'SSSS': 0.56, 'DSSS': 0.64, 'DDSS': 0.96, 'DSSD': 1.10, 'DSDS': 1.73,
            'DDDS': 2.25, 'SSSD': 1.02, 'SDSD': 1.29, 'SSDD': 2.90, 'SDDD': 3.36,
            'DDDD': 3.50,
        },
        'size_mb': {
            'SSSS': 6.12, 'DSSS': 9.56, 'DDSS': 12.00, 'DSSD': 10.08, 'DSDS': 11.69,
            'DDDS': 16.44, 'SSSD': 6.64, 'SDSD': 8.76, 'SSDD': 10.08, 'SDDD': 13.51,
            'DDDD': 18.26,
        },
    },
    'upsized': {
        'backbone': (1280, 6, 6),
        # 加大骨干时上采样头滤波器减半
        'channels': 128,
        'gflops': {'SSD': 0.32, 'SDD': 0.43, 'SSSD': 0.55, 'SDSD': 0.61},
        'size_mb': {},
    },
}

PRESETS: Dict[str, List[Tuple[str, int, Shape]]] = {
    'baseline': [('DDDD', 256, DEFAULT_BACKBONE)],
    'baseline-128': [('DDDD', 128, DEFAULT_BACKBONE)],
    'shuffle': [('SSSS', 256, DEFAULT_BACKBONE)],
    **{name: [(s, table['channels'], table['backbone']) for s in table['gflops']]
       for name, table in REFERENCE_GFLOPS.items()},
}


def preset_specs(name: str) -> List[StrategySpec]:
    """展开预设名为策略列表；'all' 为全部预设去重后的并集"""
    if name == 'all':
        seen, specs = set(), []
        for preset in PRESETS:
            for spec in preset_specs(preset):
                key = (spec.text, spec.channels, spec.backbone_out)
                if key not in seen:
                    seen.add(key)
                    specs.append(spec)
        return specs
    if name not in PRESETS:
        raise InvalidConfig(f"未知预设: {name}，可选 {sorted(PRESETS)} 或 all")
    return [parse_strategy(text, channels, backbone) for text, channels, backbone in PRESETS[name]]


def rank_agreement(reference: str = 'intermittent', cfg: Optional[CostModelConfig] = None,
                   num_landmarks: int = 106, threshold: float = 0.8) -> Dict:
    """
    规划器头部计算量与参考 GFLOPS 列的 Kendall-tau 排序一致性

    tau 低于阈值时报告中附带逐策略的名次差异
    """
    if reference not in REFERENCE_GFLOPS:
        raise InvalidConfig(f"未知参考表: {reference}")
    cfg = cfg or CostModelConfig()
    table = REFERENCE_GFLOPS[reference]
    names = list(table['gflops'])
    specs = {name: parse_strategy(name, table['channels'], table['backbone']) for name in names}
    reports = {name: estimate_cost(build_head(spec, num_landmarks, cfg), cfg)
               for name, spec in specs.items()}
    planned = [reports[n].head_flops for n in names]
    published = [table['gflops'][n] for n in names]
    tau, p_value = kendalltau(planned, published)

    planned_rank = {n: r for r, n in enumerate(sorted(names, key=lambda n: reports[n].head_flops))}
    published_rank = {n: r for r, n in enumerate(sorted(names, key=lambda n: table['gflops'][n]))}
    rows = [{'strategy': n,
             'head_flops': reports[n].head_flops,
             'reference_gflops': table['gflops'][n],
             'planned_rank': planned_rank[n],
             'reference_rank': published_rank[n],
             'rank_delta': planned_rank[n] - published_rank[n]} for n in names]

    result = {
        'reference': reference,
        'tau': float(tau),
        'p_value': float(p_value),
        'threshold': threshold,
        'passed': bool(tau >= threshold),
        'cheapest': min(names, key=lambda n: reports[n].head_flops),
        'most_expensive': max(names, key=lambda n: reports[n].head_flops),
        'rows': rows,
    }
    if not result['passed']:
        logger.warning(f"计算量排序与 {reference} 一致性不足: tau={tau:.3f} < {threshold}")
        result['discrepancies'] = [row for row in rows if row['rank_delta'] != 0]
    return result
