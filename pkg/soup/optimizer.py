# -*- coding: utf-8 -*-
"""
混合系数的优化器：AdamW + 余弦学习率。

η_t = 0.5·η·(1 + cos(π·step/total_steps))，无 warmup，终点为 0。
每次只更新活动块内的行；非活动行的 α、m、v 和更新计数都保持不变。
"""
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from params.vector import ParamVector
from soup.coefficients import MixCoefficients


class SoupTrainConfig(BaseModel):
    """[soup] 配置段"""
    model_config = ConfigDict(extra="forbid")

    model_batch: int = Field(default=4, ge=1)
    outer_iters: Union[int, Literal["auto"]] = "auto"
    inner_iters: int = Field(default=250, ge=0)
    data_batch: int = Field(default=64, ge=1)
    lr: float = Field(default=0.01, gt=0)
    weight_decay: float = Field(default=0.1, ge=0)
    softmax_lr: float = Field(default=0.05, gt=0)
    softmax_weight_decay: float = Field(default=0.0, ge=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    label_smoothing: float = Field(default=0.0, ge=0, lt=1)
    decentralize: bool = True
    reset_adam_per_block: bool = False
    seed: int = Field(default=0, ge=0)

    def resolve_outer_iters(self, num_models: int, block_size: Optional[int] = None) -> int:
        """outer_iters="auto" 时取 ⌈K/b⌉，即每个模型平均加载一次。"""
        if self.outer_iters == "auto":
            b = block_size or self.model_batch
            return max(1, math.ceil(num_models / b))
        if self.outer_iters < 1:
            raise ValueError(f"outer_iters 必须 ≥ 1，收到 {self.outer_iters}")
        return int(self.outer_iters)


def disable_decentralization(cfg: SoupTrainConfig, flag: bool = True) -> SoupTrainConfig:
    """消融开关：flag=True 时直接组合原始 θ_k（不减 θ̄），α 初始化为 1/K。"""
    return cfg.model_copy(update={"decentralize": not flag})


@dataclass
class SoupState:
    alpha: MixCoefficients
    adam_m: np.ndarray
    adam_v: np.ndarray
    row_steps: np.ndarray
    step: int = 0
    theta_fix: Optional[ParamVector] = None
    theta_star: Optional[ParamVector] = None

    @classmethod
    def initial(cls, alpha: MixCoefficients) -> "SoupState":
        return cls(
            alpha=alpha,
            adam_m=np.zeros_like(alpha.values),
            adam_v=np.zeros_like(alpha.values),
            row_steps=np.zeros(alpha.num_models, dtype=np.int64),
        )

    def reset_rows(self, rows: Sequence[int]) -> None:
        rows = list(rows)
        self.adam_m[rows] = 0.0
        self.adam_v[rows] = 0.0
        self.row_steps[rows] = 0


def cosine_lr(lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return lr
    return 0.5 * lr * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_cosine_step(
    state: SoupState,
    grads: np.ndarray,
    rows: Sequence[int],
    total_steps: int,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> SoupState:
    """
    对 rows 指定的系数行做一步 AdamW（原地修改 state 并返回）。

    :param grads: 与 rows 对齐的梯度，形状 (len(rows), 列数)
    偏差校正使用每行自己的更新计数，学习率调度使用全局 step。
    """
    if state.step >= total_steps:
        raise ValueError(f"step={state.step} 已达到 total_steps={total_steps}")
    grads = np.asarray(grads, dtype=np.float64)
    rows = list(rows)
    if grads.shape != (len(rows), state.alpha.num_columns):
        raise ValueError(f"梯度形状 {grads.shape} 与活动块 ({len(rows)}, {state.alpha.num_columns}) 不一致")

    eta = cosine_lr(lr, state.step, total_steps)
    alpha = state.alpha.values
    for g, r in zip(grads, rows):
        state.row_steps[r] += 1
        t = int(state.row_steps[r])
        state.adam_m[r] = beta1 * state.adam_m[r] + (1.0 - beta1) * g
        state.adam_v[r] = beta2 * state.adam_v[r] + (1.0 - beta2) * g * g
        m_hat = state.adam_m[r] / (1.0 - beta1 ** t)
        v_hat = state.adam_v[r] / (1.0 - beta2 ** t)
        alpha[r] = alpha[r] - eta * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * alpha[r])
    state.step += 1
    return state


def config_step(state: SoupState, grads: np.ndarray, rows: Sequence[int], cfg: SoupTrainConfig,
                total_steps: int) -> SoupState:
    """用 SoupTrainConfig 中的超参数调用 adamw_cosine_step。"""
    return adamw_cosine_step(
        state, grads, rows, total_steps,
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
    )
