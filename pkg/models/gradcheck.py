# -*- coding: utf-8 -*-
"""有限差分梯度（中心差分），用作解析梯度的校验基准。"""
from typing import Callable, Optional, Sequence

import numpy as np

from data.dataset import Dataset
from models.mlp import ModelSpec, loss, forward
from params.vector import ParamVector, as_param_vector

DEFAULT_STEP = 1e-4


def central_difference(
    func: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = DEFAULT_STEP,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    对标量函数 func 在 x 处做中心差分 (f(x+h·e_i) − f(x−h·e_i)) / 2h。

    :param indices: 只计算这些坐标；为 None 时计算全部坐标。
    :return: 与 indices（或 x）等长的导数数组
    """
    if not h > 0:
        raise ValueError(f"有限差分步长 h 必须为正数，收到 {h}")
    x = np.array(x, dtype=np.float64)
    coords = range(x.shape[0]) if indices is None else indices
    out = np.empty(len(coords), dtype=np.float64)
    for j, i in enumerate(coords):
        original = x[i]
        x[i] = original + h
        f_plus = func(x)
        x[i] = original - h
        f_minus = func(x)
        x[i] = original
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return out


def fd_gradient(
    spec: ModelSpec,
    params: ParamVector,
    batch: Dataset,
    label_smoothing: float = 0.0,
    h: float = DEFAULT_STEP,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """MLP 损失对参数的中心差分梯度。"""
    params = as_param_vector(params)

    def _loss(theta: np.ndarray) -> float:
        return loss(forward(spec, theta, batch), batch.labels, label_smoothing).value

    return central_difference(_loss, params, h=h, indices=indices)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i − n_i| / max(1, |n_i|)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
