# -*- coding: utf-8 -*-
"""
合成数据集：高斯团（Gaussian blob）分类数据，以及数据集 CSV 的读写。

CSV 格式: 表头 `f0,...,f{d-1},label`，实数保留 17 位有效数字，LF 换行。
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from params.errors import ShapeMismatchError
from params.seeding import make_rng

logger = logging.getLogger("SoupForge.data")

ROLES = ("train", "validation", "test")
SPLIT_FILES = {"train": "train.csv", "validation": "val.csv", "test": "test.csv"}


class DataSpec(BaseModel):
    """合成数据的生成参数"""
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(default=3, ge=2)
    input_dim: int = Field(default=8, ge=1)
    center_scale: float = Field(default=1.0, gt=0)
    stddev: float = Field(default=1.5, ge=0)
    n_train: int = Field(default=600, ge=1)
    n_val: int = Field(default=300, ge=1)
    n_test: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    role: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features 必须是二维矩阵，收到形状 {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels 数量与 features 行数不一致")
        if self.role not in ROLES:
            raise ValueError(f"未知的数据集角色: {self.role}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def slice(self, indices) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.role)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.role,
        )


def generate_dataset(spec: DataSpec) -> Dict[str, Dataset]:
    """
    按 DataSpec 生成 train / validation / test 三个划分。

    类中心 ~ N(0, center_scale²)，样本 = 类中心 + stddev·N(0, I)；
    每个划分内各类样本数相差不超过 1。同一 seed 结果逐位一致。
    """
    if spec.num_classes < 2 or spec.input_dim < 1:
        raise ValueError(f"DataSpec 退化: num_classes={spec.num_classes}, input_dim={spec.input_dim}")
    if spec.n_train < spec.num_classes:
        raise ValueError(f"n_train={spec.n_train} 小于类别数，训练集无法覆盖所有类别")

    rng = make_rng(spec.seed, "data")
    centers = rng.normal(0.0, spec.center_scale, size=(spec.num_classes, spec.input_dim))

    def _split(n: int, role: str) -> Dataset:
        labels = np.arange(n, dtype=np.int64) % spec.num_classes
        rng.shuffle(labels)
        noise = rng.standard_normal((n, spec.input_dim))
        return Dataset(centers[labels] + spec.stddev * noise, labels, role)

    splits = {
        "train": _split(spec.n_train, "train"),
        "validation": _split(spec.n_val, "validation"),
        "test": _split(spec.n_test, "test"),
    }
    logger.info(
        f"已生成数据集: C={spec.num_classes}, d={spec.input_dim}, "
        f"n_train={spec.n_train}, n_val={spec.n_val}, n_test={spec.n_test}"
    )
    return splits


def class_centers(spec: DataSpec) -> np.ndarray:
    """重新生成 DataSpec 对应的类中心（与 generate_dataset 使用同一随机流）。"""
    rng = make_rng(spec.seed, "data")
    return rng.normal(0.0, spec.center_scale, size=(spec.num_classes, spec.input_dim))


def write_dataset_csv(dataset: Dataset, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [f"f{i}" for i in range(dataset.input_dim)]
    frame = pd.DataFrame(dataset.features, columns=columns)
    frame["label"] = dataset.labels
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    return path


def read_dataset_csv(
    path: Union[str, os.PathLike], role: Optional[str] = None, num_classes: Optional[int] = None
) -> Dataset:
    """
    读取数据集 CSV；role 未指定时按文件名推断（train.csv / val.csv / test.csv）。
    标签必须是非负整数；给出 num_classes 时还必须小于它。
    """
    path = Path(path)
    frame = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    if not len(frame.columns) or frame.columns[-1] != "label":
        raise ValueError(f"数据集 CSV 最后一列必须是 label: {path}")
    expected = [f"f{i}" for i in range(len(frame.columns) - 1)]
    if list(frame.columns[:-1]) != expected:
        raise ValueError(f"数据集 CSV 表头应为 f0,...,f{{d-1}},label: {path}")
    if frame.empty:
        raise ValueError(f"数据集为空: {path}")

    if role is None:
        role = {"train": "train", "val": "validation", "validation": "validation"}.get(path.stem, "test")
    features = frame[expected].to_numpy(dtype=np.float64)
    if not np.array_equal(frame["label"].to_numpy(), np.round(frame["label"].to_numpy())):
        raise ShapeMismatchError(f"label 列必须是整数: {path}")
    labels = frame["label"].to_numpy(dtype=np.int64)
    upper = num_classes if num_classes is not None else np.iinfo(np.int64).max
    bad = (labels < 0) | (labels >= upper)
    if bad.any():
        raise ShapeMismatchError(f"{path} 第 {int(np.argmax(bad)) + 2} 行标签 {labels[bad][0]} 超出 [0, {upper})")
    return Dataset(features, labels, role)


def write_splits(splits: Dict[str, Dataset], out_dir: Union[str, os.PathLike]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    return {role: write_dataset_csv(ds, out_dir / SPLIT_FILES[role]) for role, ds in splits.items()}


def read_splits(data_dir: Union[str, os.PathLike], num_classes: Optional[int] = None) -> Dict[str, Dataset]:
    data_dir = Path(data_dir)
    return {role: read_dataset_csv(data_dir / name, role, num_classes) for role, name in SPLIT_FILES.items()}


def iter_epoch(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """一个 epoch 的小批量下标：随机排列后按 batch_size 连续切片（含最后不满的一批）。"""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class BatchSampler:
    """
    无限小批量采样器：第 e 个 epoch 的排列来自随机流 "<stream>/<e>"，
    小批量是排列上的连续切片，不足一个 batch 的尾部丢弃。
    """

    def __init__(self, n: int, batch_size: int, master_seed: int, stream: str):
        if n < 1 or batch_size < 1:
            raise ValueError(f"BatchSampler 参数非法: n={n}, batch_size={batch_size}")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.master_seed = master_seed
        self.stream = stream
        self.epoch = -1
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self.epoch < 0 or self._pos + self.batch_size > self.n:
            self.epoch += 1
            self._order = make_rng(self.master_seed, f"{self.stream}/{self.epoch}").permutation(self.n)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch
