#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
确定性张量算子 - 卷积、转置卷积、像素重排、推理态 BN、ReLU

张量统一为 (C, H, W) 的 numpy 数组；乘加在 float64 中累加，
结果以输入的浮点精度存储（float32 输入得到 float32 输出）。
每个算子可选接收一个 OpCounter，按实际执行的运算量计数。
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from landmark_errors import ShapeMismatch


@dataclass
class OpCounter:
    """乘加 (MAC) 与逐元素运算计数器"""

    macs: int = 0
    elementwise: int = 0
    records: List[Tuple[str, int, int]] = field(default_factory=list)

    def add(self, op: str, macs: int = 0, elementwise: int = 0) -> None:
        self.macs += int(macs)
        self.elementwise += int(elementwise)
        self.records.append((op, int(macs), int(elementwise)))

    def reset(self) -> None:
        self.macs = 0
        self.elementwise = 0
        self.records.clear()


def _storage_dtype(x: np.ndarray):
    return np.float64 if x.dtype == np.float64 else np.float32


def _check_chw(x: np.ndarray, name: str = 'x') -> None:
    if x.ndim != 3:
        raise ShapeMismatch(f"{name} 应为 (C, H, W)，实际为 {x.shape}")


def pixel_shuffle(x: np.ndarray, r: int, counter: Optional[OpCounter] = None) -> np.ndarray:
    """
    深度到空间重排: out(c, h·r+i, w·r+j) = in(c·r²+i·r+j, h, w)

    纯数据搬运，不计乘加
    """
    x = np.asarray(x)
    _check_chw(x)
    if r < 1:
        raise ShapeMismatch(f"放大倍数必须 ≥ 1，实际为 {r}")
    c_in, h, w = x.shape
    if c_in % (r * r) != 0:
        raise ShapeMismatch(f"通道数 {c_in} 不能被 r²={r * r} 整除")
    c = c_in // (r * r)
    out = x.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)
    if counter is not None:
        counter.add('pixel_shuffle')
    return np.ascontiguousarray(out)


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """pixel_shuffle 的精确逆"""
    x = np.asarray(x)
    _check_chw(x)
    if r < 1:
        raise ShapeMismatch(f"缩小倍数必须 ≥ 1，实际为 {r}")
    c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeMismatch(f"空间尺寸 {hr}×{wr} 不能被 {r} 整除")
    h, w = hr // r, wr // r
    out = x.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)
    return np.ascontiguousarray(out)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, pad: int = 0, counter: Optional[OpCounter] = None) -> np.ndarray:
    """
    二维互相关，对称零填充

    Args:
        x: (C_in, H, W)
        weights: (C_out, C_in, k, k)
        bias: (C_out,) 或 None

    Returns:
        (C_out, H_out, W_out)，H_out = (H + 2·pad − k) / stride + 1
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    _check_chw(x)
    if weights.ndim != 4:
        raise ShapeMismatch(f"卷积核应为 (C_out, C_in, k, k)，实际为 {weights.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weights.shape
    if wc_in != c_in:
        raise ShapeMismatch(f"卷积核输入通道 {wc_in} 与输入通道 {c_in} 不符")
    if stride < 1 or pad < 0:
        raise ShapeMismatch(f"stride/pad 非法: stride={stride}, pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeMismatch(f"卷积核 {kh}×{kw} 大于填充后的输入 {h + 2 * pad}×{w + 2 * pad}")

    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :h_out, :w_out]
    w64 = weights.astype(np.float64)
    out = np.tensordot(w64, windows, axes=([1, 2, 3], [0, 3, 4]))

    macs = w64.shape[0] * w64.shape[1] * w64.shape[2] * w64.shape[3] * out.shape[1] * out.shape[2]
    elementwise = 0
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"偏置长度 {bias.shape} 与输出通道 {c_out} 不符")
        out += bias[:, None, None]
        elementwise = out.size
    if counter is not None:
        counter.add('conv2d', macs, elementwise)
    return out.astype(_storage_dtype(x))


def deconv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
             stride: int = 1, pad: int = 0, counter: Optional[OpCounter] = None) -> np.ndarray:
    """
    二维转置卷积（输入中心的散射实现）

    Args:
        x: (C_in, H, W)
        weights: (C_in, C_out, k, k)

    Returns:
        (C_out, H_out, W_out)，H_out = (H − 1)·stride − 2·pad + k
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    _check_chw(x)
    if weights.ndim != 4:
        raise ShapeMismatch(f"转置卷积核应为 (C_in, C_out, k, k)，实际为 {weights.shape}")
    c_in, h, w = x.shape
    wc_in, c_out, kh, kw = weights.shape
    if wc_in != c_in:
        raise ShapeMismatch(f"转置卷积核输入通道 {wc_in} 与输入通道 {c_in} 不符")
    if stride < 1 or pad < 0:
        raise ShapeMismatch(f"stride/pad 非法: stride={stride}, pad={pad}")

    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    h_out = full_h - 2 * pad
    w_out = full_w - 2 * pad
    if h_out <= 0 or w_out <= 0:
        raise ShapeMismatch(f"输出尺寸非法: {h_out}×{w_out}")

    x64 = x.astype(np.float64)
    w64 = weights.astype(np.float64)
    full = np.zeros((c_out, full_h, full_w), dtype=np.float64)
    macs = 0
    for i in range(kh):
        for j in range(kw):
            tap = w64[:, :, i, j]
            contrib = np.tensordot(tap, x64, axes=([0], [0]))
            full[:, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += contrib
            macs += tap.shape[0] * tap.shape[1] * x64.shape[1] * x64.shape[2]
    out = full[:, pad:pad + h_out, pad:pad + w_out]

    elementwise = 0
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"偏置长度 {bias.shape} 与输出通道 {c_out} 不符")
        out = out + bias[:, None, None]
        elementwise = out.size
    if counter is not None:
        counter.add('deconv2d', macs, elementwise)
    return np.ascontiguousarray(out).astype(_storage_dtype(x))


def batchnorm_inference(x: np.ndarray, mean: np.ndarray, var: np.ndarray,
                        gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5,
                        counter: Optional[OpCounter] = None) -> np.ndarray:
    """y = γ·(x − μ)/√(σ² + ε) + β，按通道广播；每个元素计 2 次逐元素运算"""
    x = np.asarray(x)
    _check_chw(x)
    c = x.shape[0]
    params = []
    for name, value in (('mean', mean), ('var', var), ('gamma', gamma), ('beta', beta)):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (c,):
            raise ShapeMismatch(f"BN 参数 {name} 长度 {value.shape} 与通道数 {c} 不符")
        params.append(value[:, None, None])
    mu, sigma_sq, g, b = params
    out = g * (x.astype(np.float64) - mu) / np.sqrt(sigma_sq + eps) + b
    if counter is not None:
        counter.add('batchnorm', 0, 2 * out.size)
    return out.astype(_storage_dtype(x))


def relu(x: np.ndarray, counter: Optional[OpCounter] = None) -> np.ndarray:
    x = np.asarray(x)
    out = np.maximum(x, 0)
    if counter is not None:
        counter.add('relu', 0, out.size)
    return out
