# -*- coding: utf-8 -*-
"""
混合系数 α 及其梯度。

θ★ = θ̄ + Σ_k α_k ⊙ (θ_k − θ̄)，其中 α_k 是标量（全局）或每层一个值（逐层）。
展开后 θ_k 上的隐含权重为 1/K + α_k − mean(α)，每一列之和恒为 1。
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from params.errors import ShapeMismatchError
from params.vector import LayerMap, ParamVector, check_length


@dataclass
class MixCoefficients:
    """K×1（全局）或 K×(L+1)（逐层）的系数矩阵，第 r 行对应 ids[r]。"""
    values: np.ndarray
    ids: List[int] = field(default_factory=list)
    layerwise: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"系数矩阵必须是二维的，收到形状 {self.values.shape}")
        if not self.ids:
            self.ids = list(range(1, self.values.shape[0] + 1))
        if len(self.ids) != self.values.shape[0]:
            raise ShapeMismatchError("ids 数量与系数行数不一致")
        if not self.layerwise and self.values.shape[1] != 1:
            raise ShapeMismatchError(f"全局系数必须是 K×1，收到 {self.values.shape}")

    @classmethod
    def full(cls, ids: Sequence[int], num_layers: int, layerwise: bool, value: float = 0.0) -> "MixCoefficients":
        columns = num_layers if layerwise else 1
        return cls(np.full((len(ids), columns), value, dtype=np.float64), list(ids), layerwise)

    @property
    def num_models(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_columns(self) -> int:
        return int(self.values.shape[1])

    def row(self, r: int) -> np.ndarray:
        """第 r 个模型的系数，可直接作为 linear_combine 的 coef。"""
        return self.values[r]

    def copy(self) -> "MixCoefficients":
        return MixCoefficients(self.values.copy(), list(self.ids), self.layerwise)


def effective_coefficients(alpha: Union[np.ndarray, MixCoefficients], num_models: Optional[int] = None) -> np.ndarray:
    """每列: 1/K + α_k − mean_k(α)。对 α 整体平移不变，列和为 1。"""
    values = alpha.values if isinstance(alpha, MixCoefficients) else np.asarray(alpha, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    k = num_models or values.shape[0]
    if k != values.shape[0]:
        raise ShapeMismatchError(f"K={k} 与系数行数 {values.shape[0]} 不一致")
    if not np.all(np.isfinite(values)):
        raise ValueError("系数中出现 NaN/Inf")
    return 1.0 / k + values - values.mean(axis=0, keepdims=True)


def alpha_gradient(
    grad_theta: ParamVector,
    diffs: Sequence[Tuple[int, ParamVector]],
    layer_map: LayerMap,
    layerwise: bool,
) -> np.ndarray:
    """
    ∇_{α_k} L = ∇_θ★ L · d_k。

    :param diffs: [(checkpoint_id, d_k), ...]，d_k 为组合基向量（中心化时是 θ_k − θ̄）
    :return: (len(diffs), 1) 或 (len(diffs), L+1) 的梯度矩阵
    """
    grad_theta = check_length(grad_theta, layer_map.total_len)
    slices = layer_map.slices()
    out = np.empty((len(diffs), len(slices) if layerwise else 1), dtype=np.float64)
    for r, (_, d) in enumerate(diffs):
        d = check_length(d, layer_map.total_len)
        if layerwise:
            for l, sl in enumerate(slices):
                out[r, l] = np.dot(grad_theta[sl], d[sl])
        else:
            out[r, 0] = np.dot(grad_theta, d)
    return out


def softmax_weights(z: np.ndarray) -> np.ndarray:
    """按列做 softmax（先减列最大值）。"""
    z = np.asarray(z, dtype=np.float64)
    shifted = np.exp(z - z.max(axis=0, keepdims=True))
    return shifted / shifted.sum(axis=0, keepdims=True)


def softmax_mixing_gradient(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """
    softmax 参数化下 logits z 的梯度。

    w = softmax(z)（按列），gw_k = ∂L/∂w_k = ∇θ★ L · θ_k，
    则 ∂L/∂z_k = w_k · (gw_k − Σ_j w_j gw_j)。
    """
    weights = np.asarray(weights, dtype=np.float64)
    grad_weights = np.asarray(grad_weights, dtype=np.float64)
    if weights.shape != grad_weights.shape:
        raise ShapeMismatchError(f"权重形状 {weights.shape} 与梯度形状 {grad_weights.shape} 不一致")
    return weights * (grad_weights - (weights * grad_weights).sum(axis=0, keepdims=True))
