# -*- coding: utf-8 -*-
import os
import sys
from pathlib import Path
from types import SimpleNamespace
from typing import Sequence

import numpy as np
import pytest

# --- 设置项目根目录，确保可以正确导入模块 ---
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from data.dataset import DataSpec, generate_dataset  # noqa: E402
from finetune.ingredient_factory import FinetuneSettings, build_ingredients  # noqa: E402
from finetune.trainer import SearchGrid  # noqa: E402
from models.mlp import ModelSpec  # noqa: E402
from params.checkpoint import write_checkpoint  # noqa: E402
from params.store import CheckpointStore, write_manifest  # noqa: E402
from params.vector import LayerMap  # noqa: E402
from soup.optimizer import SoupTrainConfig  # noqa: E402


def build_pool(root: Path, model_spec: ModelSpec, k: int = 8, seed: int = 0) -> SimpleNamespace:
    splits = generate_dataset(DataSpec(n_train=240, n_val=90, n_test=150, seed=seed))
    settings = FinetuneSettings(k=k, master_seed=seed, pretrain_epochs=3, grid=SearchGrid(epochs=[1, 2, 3]))
    pool = build_ingredients(splits["train"], model_spec, settings, root)
    return SimpleNamespace(root=pool.root, pool=pool, spec=model_spec, splits=splits)


@pytest.fixture(scope="session")
def small_pool(tmp_path_factory):
    """K=8、MLP 8-16-3 的 ingredient 池，整个测试会话共用。"""
    return build_pool(tmp_path_factory.mktemp("pool"), ModelSpec())


@pytest.fixture(scope="session")
def linear_pool(tmp_path_factory):
    """无隐藏层的 ingredient 池（收敛轨迹需要凸的验证损失）。"""
    return build_pool(tmp_path_factory.mktemp("pool_linear"), ModelSpec(hidden_dims=[]))


@pytest.fixture
def store(small_pool):
    """每个测试一个新的 store，常驻计数互不影响。"""
    return CheckpointStore.open(small_pool.root)


@pytest.fixture
def soup_cfg():
    return SoupTrainConfig(model_batch=2, inner_iters=10, data_batch=32, seed=0)


def make_store(root: Path, layer_map: LayerMap, vectors: Sequence[np.ndarray], **kwargs) -> CheckpointStore:
    """把给定向量写成检查点和 manifest，然后打开 store。"""
    root = Path(root)
    names = []
    for i, vec in enumerate(vectors, start=1):
        name = f"model_{i:02d}.ckpt"
        write_checkpoint(layer_map, np.asarray(vec, dtype=np.float64), root / name)
        names.append(name)
    write_manifest(root, names)
    return CheckpointStore.open(root, **kwargs)
