#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
人脸关键点工具包 - 异常定义
所有可预期的错误都继承自 LandmarkError，CLI 顶层统一捕获
"""


class LandmarkError(Exception):
    """工具包异常基类"""


class DegenerateInput(LandmarkError, ValueError):
    """输入点集退化（例如所有点重合）"""


class NonInvertible(LandmarkError, ValueError):
    """变换不可逆（尺度低于数值下限）"""


class InvalidSize(LandmarkError, ValueError):
    """输出尺寸非法"""


class ShapeMismatch(LandmarkError, ValueError):
    """张量形状不一致"""


class InvalidStrategy(LandmarkError, ValueError):
    """上采样策略字符串非法"""


class BadFlipMap(LandmarkError, ValueError):
    """翻转映射不是对合置换"""


class CountMismatch(LandmarkError, ValueError):
    """关键点数量不一致"""


class EmptyInput(LandmarkError, ValueError):
    """输入为空"""


class MissingDetection(LandmarkError):
    """图片缺少检测结果"""


class SingularHessian(LandmarkError, ArithmeticError):
    """对数热图的 Hessian 矩阵奇异"""


class FormatError(LandmarkError, ValueError):
    """文件格式错误"""


class InvalidConfig(LandmarkError, ValueError):
    """配置项取值非法"""
