# -*- coding: utf-8 -*-
"""
磁盘上的检查点集合（CheckpointStore），带显式的 acquire/release 和常驻向量计数。

所有整向量大小的缓冲区都要在 store 登记：加载的检查点由 acquire 计数，
θ★ / θ_fix / 梯度等工作向量由 claim 计数。peak_resident 是一次运行中
同时常驻的整向量数的最大值，用于验证 MEHL-Soup 的 O(b) 内存约束。
"""
import logging
import os
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from params.checkpoint import iter_checkpoint_layers, read_checkpoint, read_layer_map, write_checkpoint
from params.errors import BudgetViolationError, CheckpointNotFoundError, LayerMapMismatchError
from params.vector import LayerMap, ParamVector, check_length

logger = logging.getLogger("SoupForge.params")

MANIFEST_NAME = "manifest.txt"


class ResidencyTracker:
    """常驻向量计数器，线程安全。"""

    def __init__(self, ceiling: Optional[int] = None):
        self._lock = threading.Lock()
        self.ceiling = ceiling if ceiling else None
        self._budgets: List[int] = []
        self.resident = 0
        self.peak = 0
        self.labels: Dict[str, int] = {}

    @property
    def limit(self) -> Optional[int]:
        limits = [c for c in [self.ceiling, *self._budgets] if c]
        return min(limits) if limits else None

    def charge(self, n: int, label: str) -> None:
        with self._lock:
            limit = self.limit
            if limit is not None and self.resident + n > limit:
                raise BudgetViolationError(
                    f"常驻向量数将达到 {self.resident + n}，超过上限 {limit}（申请: {label}）"
                )
            self.resident += n
            self.labels[label] = self.labels.get(label, 0) + n
            self.peak = max(self.peak, self.resident)

    def discharge(self, n: int, label: str) -> None:
        with self._lock:
            self.resident -= n
            left = self.labels.get(label, 0) - n
            if left > 0:
                self.labels[label] = left
            else:
                self.labels.pop(label, None)

    def push_budget(self, n: int) -> None:
        with self._lock:
            if self.resident > n:
                raise BudgetViolationError(f"当前已有 {self.resident} 个常驻向量，无法设置上限 {n}")
            self._budgets.append(n)

    def pop_budget(self) -> None:
        with self._lock:
            self._budgets.pop()

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.resident


class ResidentVector:
    """一个已登记的常驻整向量。release() 幂等，也可以用 with 语句。"""

    def __init__(self, tracker: ResidencyTracker, vector: ParamVector, label: str):
        self._tracker = tracker
        self.vector = vector
        self.label = label
        self._released = False

    def release(self) -> None:
        if not self._released:
            self._released = True
            self._tracker.discharge(1, self.label)
            self.vector = None

    def __enter__(self) -> "ResidentVector":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()


class CheckpointHandle(ResidentVector):
    """已加载的检查点（只读）。centered=True 时内容是 θ_k − θ̄。"""

    def __init__(self, tracker: ResidencyTracker, vector: ParamVector, checkpoint_id: int, centered: bool):
        vector.flags.writeable = False
        super().__init__(tracker, vector, label="checkpoint")
        self.checkpoint_id = checkpoint_id
        self.centered = centered


class CheckpointStore:
    """
    K 个检查点（ID 为 manifest 中的行号，从 1 开始）。

    打开时校验所有检查点共享同一个 LayerMap；之后只按需加载。
    """

    def __init__(
        self,
        root: Path,
        entries: Sequence[Tuple[int, Path]],
        layer_map: LayerMap,
        tracker: Optional[ResidencyTracker] = None,
    ):
        self.root = Path(root)
        self._entries: Dict[int, Path] = dict(entries)
        self.manifest: List[int] = [cid for cid, _ in entries]
        self.layer_map = layer_map
        self.tracker = tracker or ResidencyTracker()
        self._center_path: Optional[Path] = None

    # --- 打开与基本信息 ---
    @classmethod
    def open(
        cls,
        root: Union[str, os.PathLike],
        manifest: str = MANIFEST_NAME,
        residency_ceiling: Optional[int] = None,
    ) -> "CheckpointStore":
        root = Path(root)
        manifest_path = root / manifest if not Path(manifest).is_absolute() else Path(manifest)
        if root.is_file():
            manifest_path, root = root, root.parent
        with open(manifest_path, "r", encoding="utf-8") as f:
            names = [line.rstrip("\n") for line in f if line.strip()]
        if not names:
            raise ValueError(f"manifest 为空: {manifest_path}")

        entries: List[Tuple[int, Path]] = []
        layer_map: Optional[LayerMap] = None
        for cid, name in enumerate(names, start=1):
            path = (manifest_path.parent / name).resolve()
            if not path.exists():
                raise FileNotFoundError(f"manifest 中的检查点不存在: {path}")
            current = read_layer_map(path)
            if layer_map is None:
                layer_map = current
            elif current != layer_map:
                raise LayerMapMismatchError(f"检查点 {name} 的 LayerMap 与第一个检查点不一致")
            entries.append((cid, path))

        logger.info(f"已打开 checkpoint store: {manifest_path} (K={len(entries)}, D={layer_map.total_len})")
        return cls(root, entries, layer_map, ResidencyTracker(residency_ceiling))

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def ids(self) -> List[int]:
        return list(self.manifest)

    def path(self, checkpoint_id: int) -> Path:
        if checkpoint_id not in self._entries:
            raise CheckpointNotFoundError(f"未知的检查点 ID: {checkpoint_id}")
        return self._entries[checkpoint_id]

    def subset(self, ids: Sequence[int]) -> "CheckpointStore":
        """同一批文件、同一套计数器上的子集视图（保持原 ID）。"""
        entries = [(cid, self.path(cid)) for cid in ids]
        return CheckpointStore(self.root, entries, self.layer_map, self.tracker)

    # --- 常驻计数 ---
    @property
    def resident_count(self) -> int:
        return self.tracker.resident

    @property
    def peak_resident(self) -> int:
        return self.tracker.peak

    def reset_peak(self) -> None:
        self.tracker.reset_peak()

    @contextmanager
    def budget(self, n: int) -> Iterator[None]:
        """在 with 块内把常驻上限临时收紧到 n。"""
        self.tracker.push_budget(n)
        try:
            yield
        finally:
            self.tracker.pop_budget()

    def claim(self, vector: ParamVector, label: str) -> ResidentVector:
        """登记一个工作向量（θ★、θ_fix、梯度等）。"""
        check_length(vector, self.layer_map.total_len)
        self.tracker.charge(1, label)
        return ResidentVector(self.tracker, vector, label)

    # --- 加载 ---
    def acquire(self, ids: Sequence[int], centered: bool = False) -> List[CheckpointHandle]:
        """
        加载一组检查点，返回只读句柄。

        :param centered: 为 True 时返回 θ_k − θ̄（θ̄ 需先 stage_center），
                         差值在加载时按层流式计算。
        """
        ids = list(ids)
        for cid in ids:
            self.path(cid)
        if centered and self._center_path is None:
            raise RuntimeError("centered 加载需要先调用 stage_center()")

        self.tracker.charge(len(ids), "checkpoint")
        handles: List[CheckpointHandle] = []
        try:
            for cid in ids:
                layer_map, vec = read_checkpoint(self._entries[cid])
                if layer_map != self.layer_map:
                    raise LayerMapMismatchError(f"检查点 {cid} 的 LayerMap 与 store 不一致")
                if centered:
                    for layer, center in iter_checkpoint_layers(self._center_path):
                        vec[layer.offset:layer.stop] -= center
                handles.append(CheckpointHandle(self.tracker, vec, cid, centered))
        except BaseException:
            # 已建好的句柄各自归还名额，未建好的部分在这里归还
            for h in handles:
                h.release()
            self.tracker.discharge(len(ids) - len(handles), "checkpoint")
            raise
        return handles

    @staticmethod
    def release(handles: Sequence[ResidentVector]) -> None:
        for h in handles:
            h.release()

    def stream(self, ids: Optional[Sequence[int]] = None, centered: bool = False) -> Iterator[Tuple[int, ParamVector]]:
        """一次只加载一个检查点的迭代器。"""
        for cid in (self.manifest if ids is None else ids):
            handle = self.acquire([cid], centered=centered)[0]
            try:
                yield cid, handle.vector
            finally:
                handle.release()

    # --- θ̄ 暂存 ---
    def stage_center(self, center: ParamVector) -> None:
        """把 θ̄ 写到临时检查点，之后 centered 加载按层流式读取它。"""
        self.clear_center()
        fd, name = tempfile.mkstemp(prefix="soupforge_center_", suffix=".ckpt")
        os.close(fd)
        write_checkpoint(self.layer_map, center, name)
        self._center_path = Path(name)

    def clear_center(self) -> None:
        if self._center_path is not None:
            try:
                self._center_path.unlink()
            except FileNotFoundError:
                pass
            self._center_path = None


def write_manifest(root: Union[str, os.PathLike], filenames: Sequence[str]) -> Path:
    path = Path(root) / MANIFEST_NAME
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for name in filenames:
            f.write(f"{name}\n")
    return path


def mean_vector(store: CheckpointStore) -> ParamVector:
    """
    流式计算 θ̄ = (1/K) Σ θ_k，一次只加载一个检查点（最多 2 个常驻向量）。

    使用增量均值 acc += (θ_k − acc)/n：K 个相同向量的均值严格等于该向量。
    """
    if len(store) < 1:
        raise ValueError("store 中至少需要一个检查点")
    slices = store.layer_map.slices()
    acc = np.zeros(store.layer_map.total_len, dtype=np.float64)
    with store.claim(acc, "mean"):
        for n, (_, vec) in enumerate(store.stream(), start=1):
            for sl in slices:
                acc[sl] += (vec[sl] - acc[sl]) / n
    return acc
