# -*- coding: utf-8 -*-
"""
Ingredient 工厂：预训练 θ_0，随机搜索 K 组超参数，并行微调，写出检查点与 manifest。

输出目录结构:
    theta_0.ckpt
    ingredient_01.ckpt ... ingredient_K.ckpt
    manifest.txt   每行一个 ingredient 文件名，行号即 checkpoint ID
    hparams.csv    每个 ingredient 的超参数
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from data.dataset import Dataset
from finetune.trainer import HyperParams, SearchGrid, finetune_one, pretrain, random_search
from models.mlp import ModelSpec
from params.checkpoint import write_checkpoint
from params.seeding import derive_seed
from params.store import write_manifest

logger = logging.getLogger("SoupForge.finetune")

THETA0_NAME = "theta_0.ckpt"
HPARAMS_NAME = "hparams.csv"


class FinetuneSettings(BaseModel):
    """[finetune] 配置段"""
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=16, ge=1)
    master_seed: int = Field(default=0, ge=0)
    batch_size: int = Field(default=32, ge=1)
    pretrain_lr: float = Field(default=0.05, ge=0)
    pretrain_epochs: int = Field(default=5, ge=0)
    pretrain_weight_decay: float = Field(default=0.0, ge=0)
    jobs: int = Field(default=1, ge=1)
    grid: SearchGrid = Field(default_factory=SearchGrid)


@dataclass
class IngredientPool:
    root: Path
    theta_0: Path
    manifest: Path
    ingredients: List[Path] = field(default_factory=list)
    hparams: List[HyperParams] = field(default_factory=list)


def ingredient_name(index: int, k: int) -> str:
    width = max(2, len(str(k)))
    return f"ingredient_{index:0{width}d}.ckpt"


def build_ingredients(
    train: Dataset,
    model_spec: ModelSpec,
    settings: FinetuneSettings,
    out_dir: Union[str, os.PathLike],
    jobs: Optional[int] = None,
) -> IngredientPool:
    """
    整个工厂是 (训练集, ModelSpec, settings) 的纯函数：
    每个 ingredient 拥有自己的派生种子，并行顺序不影响结果。
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer_map = model_spec.layer_map()
    jobs = jobs or settings.jobs

    pretrain_hp = HyperParams(
        learning_rate=settings.pretrain_lr,
        weight_decay=settings.pretrain_weight_decay,
        epochs=settings.pretrain_epochs,
        seed=derive_seed(settings.master_seed, "pretrain"),
    )
    theta_0 = pretrain(model_spec, train, pretrain_hp, settings.batch_size)
    theta_0_path = out_dir / THETA0_NAME
    write_checkpoint(layer_map, theta_0, theta_0_path)

    configs = random_search(settings.k, settings.master_seed, settings.grid)
    names = [ingredient_name(i, settings.k) for i in range(1, settings.k + 1)]

    def _job(index: int) -> Path:
        hp = configs[index]
        theta_k = finetune_one(model_spec, theta_0, train, hp, settings.batch_size)
        path = out_dir / names[index]
        write_checkpoint(layer_map, theta_k, path)
        logger.info(
            f"ingredient {index + 1}/{settings.k} 完成: lr={hp.learning_rate}, wd={hp.weight_decay}, "
            f"epochs={hp.epochs}, ls={hp.label_smoothing}"
        )
        return path

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        paths = list(executor.map(_job, range(settings.k)))

    manifest = write_manifest(out_dir, names)
    frame = pd.DataFrame([
        {"model_id": i + 1, "file": names[i], **configs[i].model_dump()}
        for i in range(settings.k)
    ])
    frame.to_csv(out_dir / HPARAMS_NAME, index=False, float_format="%.17g", lineterminator="\n")

    logger.info(f"ingredient 池已写出: {out_dir} (K={settings.k}, jobs={jobs})")
    return IngredientPool(out_dir, theta_0_path, manifest, paths, configs)
