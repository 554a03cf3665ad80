#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
流水线配置

优先级: 默认值 < JSON 配置文件 < LANDMARK_* 环境变量 < 命令行参数
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

from face_geometry import ReferenceTemplate
from head_planner import DEFAULT_BACKBONE, CostModelConfig, StrategySpec, parse_strategy
from heatmap_codec import AMPLITUDE_MODES, DECODERS, GaussianParams
from landmark_augmentation import AugmentationConfig, FlipMap
from landmark_errors import InvalidConfig
from log_utils import get_logger

logger = get_logger('pipeline_config')

ENV_PREFIX = 'LANDMARK_'
IMAGE_FORMATS = ('ppm', 'png')


@dataclass
class PipelineConfig:
    """关键点流水线的全部可配置项"""

    input_size: int = 192
    heatmap_size: int = 96
    num_landmarks: int = 106
    sigma: float = 1.5
    amplitude_mode: str = 'peak-one'
    decoder: str = 'gaussian'
    gradient_c: float = 0.25
    tta: bool = True
    tta_stack_heatmaps: bool = False
    strategy: str = 'DDDD'
    channels: int = 256
    backbone: Tuple[int, int, int] = DEFAULT_BACKBONE
    deconv_kernel: int = 4
    shuffle_conv_kernel: int = 3
    jobs: int = 1
    seed: int = 0
    ced_steps: int = 1000
    failure_threshold: float = 0.08
    naive_order: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    template_path: Optional[str] = None
    flip_map_path: Optional[str] = None
    weights_dir: Optional[str] = None
    image_format: str = 'ppm'
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)
        self.backbone = tuple(int(v) for v in self.backbone)
        self.naive_order = [int(v) for v in self.naive_order]

    @property
    def stride(self) -> int:
        return self.input_size // self.heatmap_size

    def validate(self) -> 'PipelineConfig':
        """校验取值，返回自身以便链式调用"""
        if self.input_size <= 0 or self.heatmap_size <= 0:
            raise InvalidConfig("输入尺寸与热图尺寸必须为正")
        if self.input_size % self.heatmap_size != 0:
            raise InvalidConfig(f"输入尺寸 {self.input_size} 必须是热图尺寸 "
                                f"{self.heatmap_size} 的整数倍")
        if self.heatmap_size < 3:
            raise InvalidConfig("热图尺寸至少为 3")
        if self.num_landmarks <= 0:
            raise InvalidConfig("关键点数必须为正")
        if self.sigma <= 0:
            raise InvalidConfig(f"sigma 必须大于 0，实际为 {self.sigma}")
        if self.amplitude_mode not in AMPLITUDE_MODES:
            raise InvalidConfig(f"未知幅值模式: {self.amplitude_mode}")
        if self.decoder not in DECODERS:
            raise InvalidConfig(f"未知解码方法: {self.decoder}，可选 {DECODERS}")
        if self.jobs < 1:
            raise InvalidConfig("jobs 至少为 1")
        if self.ced_steps < 2:
            raise InvalidConfig("ced_steps 至少为 2")
        if self.failure_threshold <= 0:
            raise InvalidConfig("失败阈值必须为正")
        if sorted(self.naive_order) != [0, 1, 2, 3, 4]:
            raise InvalidConfig(f"naive_order 必须是 0-4 的置换，实际为 {self.naive_order}")
        if self.image_format not in IMAGE_FORMATS:
            raise InvalidConfig(f"未知图片格式: {self.image_format}，可选 {IMAGE_FORMATS}")
        self.strategy_spec()
        self.cost_config()
        return self

    def gaussian_params(self) -> GaussianParams:
        return GaussianParams(self.sigma, self.amplitude_mode)

    def strategy_spec(self) -> StrategySpec:
        return parse_strategy(self.strategy, self.channels, self.backbone)

    def cost_config(self) -> CostModelConfig:
        return CostModelConfig(deconv_kernel=self.deconv_kernel,
                               shuffle_conv_kernel=self.shuffle_conv_kernel)

    def load_template(self) -> ReferenceTemplate:
        if self.template_path:
            template = ReferenceTemplate.from_file(self.template_path)
        else:
            template = ReferenceTemplate.default()
        if template.size != self.input_size:
            template = template.scaled(self.input_size)
        return template

    def load_flip_map(self) -> FlipMap:
        """读取翻转映射；未配置时 5 点使用内置表，其它点数必须提供文件"""
        if self.flip_map_path:
            flip_map = FlipMap.from_file(self.flip_map_path)
        elif self.num_landmarks == 5:
            flip_map = FlipMap.five_point()
        else:
            raise InvalidConfig(f"{self.num_landmarks} 点关键点需要提供翻转映射文件 (flip_map_path)")
        if len(flip_map) != self.num_landmarks:
            raise InvalidConfig(f"翻转映射长度 {len(flip_map)} 与关键点数 {self.num_landmarks} 不符")
        return flip_map

    @classmethod
    def from_dict(cls, data: Mapping) -> 'PipelineConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"配置含未知字段: {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> 'PipelineConfig':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"配置文件不是合法 JSON: {path} ({e})") from e
        if not isinstance(data, dict):
            raise InvalidConfig(f"配置文件顶层必须是对象: {path}")
        return cls.from_dict(data)

    def with_env(self, environ: Optional[Mapping[str, str]] = None) -> 'PipelineConfig':
        """用 LANDMARK_<字段名大写> 环境变量覆盖标量字段"""
        environ = os.environ if environ is None else environ
        updates = {}
        for f in fields(self):
            key = ENV_PREFIX + f.name.upper()
            if key not in environ:
                continue
            raw = environ[key]
            current = getattr(self, f.name)
            try:
                if isinstance(current, bool):
                    updates[f.name] = raw.strip().lower() in ('1', 'true', 'yes', 'on')
                elif isinstance(current, int):
                    updates[f.name] = int(raw)
                elif isinstance(current, float):
                    updates[f.name] = float(raw)
                elif f.name == 'backbone':
                    updates[f.name] = tuple(int(v) for v in raw.lower().split('x'))
                elif f.name == 'naive_order':
                    updates[f.name] = [int(v) for v in raw.split(',')]
                elif current is None or isinstance(current, str):
                    updates[f.name] = raw
                else:
                    continue
            except ValueError as e:
                raise InvalidConfig(f"环境变量 {key}={raw!r} 无法解析") from e
            logger.debug(f"环境变量覆盖配置: {f.name}={updates[f.name]!r}")
        return self.updated(**updates)

    def updated(self, **changes) -> 'PipelineConfig':
        """返回应用了非 None 覆盖值的新配置"""
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return PipelineConfig.from_dict(data)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['backbone'] = list(self.backbone)
        return data

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        return path


def load_config(path: Optional[Union[str, Path]] = None,
                environ: Optional[Mapping[str, str]] = None, **overrides) -> PipelineConfig:
    """按 默认值 → 文件 → 环境变量 → 显式覆盖 的顺序组装并校验配置"""
    cfg = PipelineConfig.from_json(path) if path else PipelineConfig()
    cfg = cfg.with_env(environ).updated(**overrides)
    return cfg.validate()
