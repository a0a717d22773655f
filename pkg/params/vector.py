# -*- coding: utf-8 -*-
"""
参数向量与分层映射。

ParamVector 就是一维 float64 的 numpy 数组；LayerMap 记录每一层在向量中的
名称、形状和偏移，是逐层混合（layer-wise mixing）的基本单位。
"""
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from params.errors import ShapeMismatchError

ParamVector = np.ndarray
Coefficient = Union[float, np.ndarray]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class LayerMap:
    """参数向量的分层描述，层顺序即序列化顺序。"""
    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        seen = set()
        expected_offset = 0
        for layer in self.layers:
            if layer.name in seen:
                raise ShapeMismatchError(f"层名称重复: {layer.name}")
            seen.add(layer.name)
            if not layer.shape or any(int(d) <= 0 for d in layer.shape):
                raise ShapeMismatchError(f"层 {layer.name} 的形状非法: {layer.shape}")
            if layer.offset != expected_offset:
                raise ShapeMismatchError(
                    f"层 {layer.name} 偏移为 {layer.offset}，应为 {expected_offset}（偏移必须连续）"
                )
            expected_offset = layer.stop

    @classmethod
    def from_shapes(cls, shapes: Iterable[Tuple[str, Sequence[int]]]) -> "LayerMap":
        layers: List[LayerSpec] = []
        offset = 0
        for name, shape in shapes:
            spec = LayerSpec(name=str(name), shape=tuple(int(d) for d in shape), offset=offset)
            layers.append(spec)
            offset += spec.size
        return cls(layers=tuple(layers))

    @property
    def total_len(self) -> int:
        return self.layers[-1].stop if self.layers else 0

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def slices(self) -> List[slice]:
        return [slice(layer.offset, layer.stop) for layer in self.layers]

    def split(self, vec: ParamVector) -> Dict[str, np.ndarray]:
        """按层切分向量，返回按层形状 reshape 后的视图（不复制）。"""
        vec = check_length(vec, self.total_len)
        return {
            layer.name: vec[layer.offset:layer.stop].reshape(layer.shape)
            for layer in self.layers
        }

    def flatten(self, arrays: Dict[str, np.ndarray]) -> ParamVector:
        out = np.empty(self.total_len, dtype=np.float64)
        for layer in self.layers:
            arr = np.asarray(arrays[layer.name], dtype=np.float64)
            if arr.shape != layer.shape:
                raise ShapeMismatchError(
                    f"层 {layer.name} 形状为 {arr.shape}，期望 {layer.shape}"
                )
            out[layer.offset:layer.stop] = arr.reshape(-1)
        return out


def as_param_vector(data) -> ParamVector:
    vec = np.asarray(data, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] == 0:
        raise ShapeMismatchError(f"ParamVector 必须是非空一维数组，收到形状 {vec.shape}")
    return vec


def check_length(vec, length: int) -> ParamVector:
    vec = as_param_vector(vec)
    if vec.shape[0] != length:
        raise ShapeMismatchError(f"向量长度为 {vec.shape[0]}，期望 {length}")
    return vec


def check_finite(vec: ParamVector, what: str = "向量") -> ParamVector:
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{what} 中出现 NaN/Inf")
    return vec


def linear_combine(
    base: ParamVector,
    terms: Sequence[Tuple[Coefficient, ParamVector]],
    layer_map: Optional[LayerMap] = None,
    out: Optional[ParamVector] = None,
) -> ParamVector:
    """
    out = base + Σ_j coef_j · vec_j，按 terms 给定的顺序从左到右累加。

    coef 可以是标量，也可以是长度为 L+1 的逐层系数（此时必须提供 layer_map）；
    长度为 1 的系数数组视为全局标量。提供 layer_map 时按层切片累加，
    不会产生整向量大小的临时数组。

    :param out: 可选的输出缓冲区（不能与任何 vec 共用内存）。
    """
    base = as_param_vector(base)
    dim = base.shape[0]
    if layer_map is not None and layer_map.total_len != dim:
        raise ShapeMismatchError(f"LayerMap 总长度 {layer_map.total_len} 与向量长度 {dim} 不一致")

    if out is None:
        out = base.copy()
    else:
        check_length(out, dim)
        if out is not base:
            out[...] = base

    slices = layer_map.slices() if layer_map is not None else None
    for coef, vec in terms:
        vec = check_length(vec, dim)
        c = np.asarray(coef, dtype=np.float64)
        if c.ndim == 1 and c.shape[0] == 1:
            c = c[0]
        if c.ndim == 0:
            if slices is None:
                out += c * vec
            else:
                for sl in slices:
                    out[sl] += c * vec[sl]
            continue

        if slices is None:
            raise ShapeMismatchError("逐层系数需要提供 layer_map")
        if c.shape != (len(slices),):
            raise ShapeMismatchError(f"逐层系数形状为 {c.shape}，期望 ({len(slices)},)")
        for l, sl in enumerate(slices):
            out[sl] += c[l] * vec[sl]

    return check_finite(out, "线性组合结果")


def cosine_similarity(vec1: ParamVector, vec2: ParamVector) -> Optional[float]:
    """计算两个向量的余弦相似度；任一向量范数为 0 时返回 None。"""
    dot_product = float(np.dot(vec1, vec2))
    norm_vec1 = float(np.linalg.norm(vec1))
    norm_vec2 = float(np.linalg.norm(vec2))
    if norm_vec1 == 0 or norm_vec2 == 0:
        return None
    return float(np.clip(dot_product / (norm_vec1 * norm_vec2), -1.0, 1.0))
