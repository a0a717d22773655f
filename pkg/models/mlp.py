# -*- coding: utf-8 -*-
"""
全连接分类器（MLP）

参数以一维 ParamVector 保存，层名依次为 w0, b0, w1, b1, ...；
w_i 形状为 (fan_in, fan_out)，logits = x @ W + b。
提供前向、带标签平滑的交叉熵、解析反向传播、准确率和 logit 集成。
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from data.dataset import Dataset
from params.errors import LayerMapMismatchError, ShapeMismatchError
from params.vector import LayerMap, ParamVector, check_length

logger = logging.getLogger("SoupForge.models")

Batch = Union[Dataset, np.ndarray]

# verify --corrupt-grad 使用的故障注入开关
_GRADIENT_FAULT = {"active": False}


class ModelSpec(BaseModel):
    """MLP 结构描述"""
    model_config = ConfigDict(extra="forbid")

    input_dim: int = Field(default=8, ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [16])
    num_classes: int = Field(default=3, ge=2)
    activation: Literal["relu", "tanh"] = "relu"

    @field_validator("hidden_dims")
    @classmethod
    def _positive_hidden(cls, value: List[int]) -> List[int]:
        if any(h < 1 for h in value):
            raise ValueError(f"hidden_dims 必须全为正整数: {value}")
        return value

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    @property
    def num_params(self) -> int:
        dims = self.layer_dims
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    def layer_map(self) -> LayerMap:
        dims = self.layer_dims
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            shapes.append((f"w{i}", (fan_in, fan_out)))
            shapes.append((f"b{i}", (fan_out,)))
        return LayerMap.from_shapes(shapes)

    @classmethod
    def from_layer_map(cls, layer_map: LayerMap, activation: str = "relu") -> "ModelSpec":
        """从检查点的 LayerMap 还原 MLP 结构（层必须是 w0,b0,w1,b1,...）。"""
        layers = layer_map.layers
        if not layers or len(layers) % 2:
            raise LayerMapMismatchError(f"LayerMap 不是 MLP 结构: {layer_map.names}")
        dims = []
        for i in range(len(layers) // 2):
            w, b = layers[2 * i], layers[2 * i + 1]
            if w.name != f"w{i}" or b.name != f"b{i}" or len(w.shape) != 2 or b.shape != (w.shape[1],):
                raise LayerMapMismatchError(f"第 {i} 层不符合 MLP 结构: {w.name}{w.shape}, {b.name}{b.shape}")
            if dims and dims[-1] != w.shape[0]:
                raise LayerMapMismatchError(f"第 {i} 层输入维度 {w.shape[0]} 与上一层输出 {dims[-1]} 不一致")
            if not dims:
                dims.append(w.shape[0])
            dims.append(w.shape[1])
        return cls(input_dim=dims[0], hidden_dims=dims[1:-1], num_classes=dims[-1], activation=activation)


@dataclass
class LossValue:
    value: float
    correct: int
    n: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot 均匀初始化：W ~ U(−s, s)，s = sqrt(6/(fan_in+fan_out))，偏置为 0。"""
    layer_map = spec.layer_map()
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"w{i}"] = rng.uniform(-s, s, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return layer_map.flatten(arrays)


def _features(spec: ModelSpec, batch: Batch) -> np.ndarray:
    x = batch.features if isinstance(batch, Dataset) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatchError(f"输入形状 {x.shape} 与 input_dim={spec.input_dim} 不一致")
    return x


def _weights(spec: ModelSpec, params: ParamVector) -> List[Tuple[np.ndarray, np.ndarray]]:
    params = check_length(params, spec.num_params)
    views = spec.layer_map().split(params)
    return [(views[f"w{i}"], views[f"b{i}"]) for i in range(spec.num_layers)]


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(spec: ModelSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        # relu 在 0 处的次梯度取 0
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _forward_cache(spec: ModelSpec, params: ParamVector, x: np.ndarray):
    weights = _weights(spec, params)
    activations = [x]
    pre_activations = []
    a = x
    for i, (w, b) in enumerate(weights):
        z = a @ w + b
        if i < len(weights) - 1:
            pre_activations.append(z)
            a = _activate(spec, z)
            activations.append(a)
        else:
            a = z
    return weights, activations, pre_activations, a


def forward(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """逐层前向计算，返回 (batch_size, C) 的 logits。"""
    *_, logits = _forward_cache(spec, params, _features(spec, batch))
    return logits


def _check_smoothing(label_smoothing: float) -> None:
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing 必须在 [0, 1) 内，收到 {label_smoothing}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _smoothed_targets(labels: np.ndarray, num_classes: int, label_smoothing: float) -> np.ndarray:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatchError(f"标签超出 [0, {num_classes}) 范围: min={labels.min()}, max={labels.max()}")
    target = np.full((labels.shape[0], num_classes), label_smoothing / num_classes)
    target[np.arange(labels.shape[0]), labels] += 1.0 - label_smoothing
    return target


def loss(logits: np.ndarray, labels: np.ndarray, label_smoothing: float = 0.0) -> LossValue:
    """
    带标签平滑的交叉熵（batch 均值）。

    目标分布为 (1−ε)·onehot + ε/C；log-softmax 先减去行最大值保证数值稳定。
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("loss 需要非空的 batch")
    if labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"labels 形状 {labels.shape} 与 logits {logits.shape} 不一致")
    _check_smoothing(label_smoothing)

    target = _smoothed_targets(labels, logits.shape[1], label_smoothing)
    per_row = -(target * _log_softmax(logits)).sum(axis=1)
    correct = int(np.count_nonzero(np.argmax(logits, axis=1) == labels))
    return LossValue(value=float(per_row.mean()), correct=correct, n=int(labels.shape[0]))


def loss_and_gradient(
    spec: ModelSpec, params: ParamVector, batch: Dataset, label_smoothing: float = 0.0
) -> Tuple[LossValue, ParamVector]:
    """一次前向 + 反向，返回 (LossValue, ∇θ)。"""
    x = _features(spec, batch)
    labels = batch.labels
    weights, activations, pre_activations, logits = _forward_cache(spec, params, x)
    value = loss(logits, labels, label_smoothing)

    n = x.shape[0]
    log_probs = _log_softmax(logits)
    delta = (np.exp(log_probs) - _smoothed_targets(labels, spec.num_classes, label_smoothing)) / n

    grad = np.empty(spec.num_params, dtype=np.float64)
    layer_map = spec.layer_map()
    grads = layer_map.split(grad)
    for i in range(len(weights) - 1, -1, -1):
        grads[f"w{i}"][...] = activations[i].T @ delta
        grads[f"b{i}"][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i][0].T) * _activation_grad(spec, pre_activations[i - 1], activations[i])

    if _GRADIENT_FAULT["active"]:
        k = int(np.argmax(np.abs(grad)))
        grad[k] = -grad[k]
    return value, grad


def backward(spec: ModelSpec, params: ParamVector, batch: Dataset, label_smoothing: float = 0.0) -> ParamVector:
    """loss 对全部参数的解析梯度，长度 D。"""
    return loss_and_gradient(spec, params, batch, label_smoothing)[1]


@contextmanager
def gradient_fault() -> Iterator[None]:
    """故障注入：with 块内 backward 会翻转绝对值最大的一个梯度分量的符号。"""
    logger.warning("梯度故障注入已开启")
    _GRADIENT_FAULT["active"] = True
    try:
        yield
    finally:
        _GRADIENT_FAULT["active"] = False


def evaluate(spec: ModelSpec, params: ParamVector, data: Dataset, label_smoothing: float = 0.0) -> LossValue:
    if len(data) == 0:
        raise ValueError("evaluate 需要非空数据集")
    return loss(forward(spec, params, data), data.labels, label_smoothing)


def accuracy(spec: ModelSpec, params: ParamVector, data: Dataset) -> float:
    """argmax 预测正确的比例；并列时取最小的类别下标。"""
    if len(data) == 0:
        raise ValueError("accuracy 需要非空数据集")
    predictions = np.argmax(forward(spec, params, data), axis=1)
    return float(np.count_nonzero(predictions == data.labels)) / len(data)


def ensemble_logits(spec: ModelSpec, models: Iterable[ParamVector], batch: Batch) -> np.ndarray:
    """多个模型 logits 的算术平均（增量均值，K 个相同模型严格等于单模型）。

    models 可以是生成器（例如 store.stream() 逐个加载）。
    """
    acc = None
    for n, params in enumerate(models, start=1):
        logits = forward(spec, params, batch)
        if acc is None:
            acc = logits.copy()
        else:
            acc += (logits - acc) / n
    if acc is None:
        raise ValueError("ensemble_logits 至少需要一个模型")
    return acc


def ensemble_accuracy(spec: ModelSpec, models: Iterable[ParamVector], data: Dataset) -> float:
    predictions = np.argmax(ensemble_logits(spec, models, data), axis=1)
    return float(np.count_nonzero(predictions == data.labels)) / len(data)
