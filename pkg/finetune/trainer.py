# -*- coding: utf-8 -*-
"""
预训练与微调：带解耦权重衰减的小批量 SGD，以及随机超参数搜索。

更新规则: θ ← θ − lr·(∇ℓ_batch + wd·θ)，每个 epoch 的 batch 顺序来自一次种子化的随机排列。
"""
import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from data.dataset import Dataset, iter_epoch
from models.mlp import ModelSpec, init_params, loss_and_gradient
from params.errors import TrainingDivergedError
from params.seeding import derive_seed, make_rng
from params.vector import ParamVector, check_length

logger = logging.getLogger("SoupForge.finetune")

_MAX_SEED = (1 << 64) - 1


class HyperParams(BaseModel):
    """单个模型的训练超参数"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    epochs: int = Field(default=5, ge=0)
    label_smoothing: float = Field(default=0.0, ge=0, lt=1)
    seed: int = Field(default=0, ge=0, le=_MAX_SEED)


class SearchGrid(BaseModel):
    """随机搜索的候选值"""
    model_config = ConfigDict(extra="forbid")

    learning_rates: List[float] = Field(default_factory=lambda: [0.003, 0.01, 0.03, 0.1])
    weight_decays: List[float] = Field(default_factory=lambda: [0.0, 1e-4, 1e-3, 1e-2])
    epochs: List[int] = Field(default_factory=lambda: [2, 5, 10])
    label_smoothings: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1])

    @field_validator("learning_rates", "weight_decays", "epochs", "label_smoothings")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("搜索网格不能为空")
        return value


def random_search(n: int, master_seed: int, grid: Optional[SearchGrid] = None) -> List[HyperParams]:
    """
    从网格中均匀抽取 n 组超参数。

    第 i 组的抽样流为 "search/<i>"，训练种子为 derive_seed(master_seed, "finetune/<i>")，
    因此第 i 组与 n 无关。
    """
    if n < 1:
        raise ValueError(f"random_search 需要 n ≥ 1，收到 {n}")
    grid = grid or SearchGrid()
    configs = []
    for i in range(1, n + 1):
        rng = make_rng(master_seed, f"search/{i}")
        configs.append(HyperParams(
            learning_rate=grid.learning_rates[rng.integers(len(grid.learning_rates))],
            weight_decay=grid.weight_decays[rng.integers(len(grid.weight_decays))],
            epochs=grid.epochs[rng.integers(len(grid.epochs))],
            label_smoothing=grid.label_smoothings[rng.integers(len(grid.label_smoothings))],
            seed=derive_seed(master_seed, f"finetune/{i}"),
        ))
    return configs


def sgd_train(
    spec: ModelSpec,
    params: ParamVector,
    train: Dataset,
    hparams: HyperParams,
    batch_size: int = 32,
) -> ParamVector:
    """从 params 出发做 hparams.epochs 个 epoch 的 SGD，返回新向量（不修改输入）。"""
    if len(train) == 0:
        raise ValueError("训练集为空")
    if batch_size < 1:
        raise ValueError(f"batch_size 必须为正整数，收到 {batch_size}")
    theta = check_length(params, spec.num_params).copy()
    rng = np.random.default_rng(hparams.seed)
    lr, wd = hparams.learning_rate, hparams.weight_decay

    for epoch in range(hparams.epochs):
        for indices in iter_epoch(len(train), batch_size, rng):
            value, grad = loss_and_gradient(spec, theta, train.slice(indices), hparams.label_smoothing)
            if not np.isfinite(value.value) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"第 {epoch + 1} 个 epoch 出现 NaN/Inf（lr={lr}, wd={wd}）")
            theta -= lr * (grad + wd * theta)
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError(f"第 {epoch + 1} 个 epoch 后参数出现 NaN/Inf（lr={lr}, wd={wd}）")
    return theta


def pretrain(spec: ModelSpec, train: Dataset, hparams: HyperParams, batch_size: int = 32) -> ParamVector:
    """
    预训练得到 θ_0：Glorot 初始化（随机流 "init"，种子取 hparams.seed）后做 SGD。
    epochs=0 时返回初始化结果。
    """
    theta = init_params(spec, make_rng(hparams.seed, "init"))
    theta = sgd_train(spec, theta, train, hparams, batch_size)
    logger.info(f"预训练完成: D={spec.num_params}, lr={hparams.learning_rate}, epochs={hparams.epochs}")
    return theta


def finetune_one(
    spec: ModelSpec,
    theta_0: ParamVector,
    train: Dataset,
    hparams: HyperParams,
    batch_size: int = 32,
) -> ParamVector:
    """从 θ_0 出发按 hparams 微调一个 ingredient。lr=0 时结果与 θ_0 完全相同。"""
    return sgd_train(spec, theta_0, train, hparams, batch_size)
