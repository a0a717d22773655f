# -*- coding: utf-8 -*-
"""
基准与测量：构造耗时、常驻向量峰值、收敛轨迹、去中心化余弦报告、
去掉头部模型后的敏感性实验和超参数消融。

所有报告写成 CSV（UTF-8，LF，实数 17 位有效数字）。
耗时使用单调时钟，只覆盖 soup 构造本身，不含数据生成和评估。
"""
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from data.dataset import Dataset
from models.mlp import ModelSpec, accuracy, ensemble_accuracy
from params.errors import ConfigError
from params.store import CheckpointStore, mean_vector
from params.vector import cosine_similarity
from soup.methods import SoupResult, TraceEntry, mehl_soup
from soup.soup_engine import METHODS, SoupEngine
from soup.optimizer import SoupTrainConfig

logger = logging.getLogger("SoupForge.bench")

FLOAT_FORMAT = "%.17g"

BENCH_COLUMNS = [
    "method", "K", "b", "T", "J", "wall_seconds", "peak_resident_vectors",
    "val_acc", "test_acc", "members_or_alpha_summary",
]


class BenchSettings(BaseModel):
    """[bench] 配置段"""
    model_config = ConfigDict(extra="forbid")

    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    sensitivity: List[int] = Field(default_factory=list)
    convergence: List[int] = Field(default_factory=list)
    ablation_model_batch: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    ablation_outer_iters: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    ablation_inner_iters: List[int] = Field(default_factory=lambda: [50, 100, 250])
    ablation: bool = False
    with_references: bool = False


@dataclass
class BenchReport:
    method: str
    K: int
    b: int
    T: int
    J: int
    wall_seconds: float
    peak_resident_vectors: int
    val_acc: float
    test_acc: float
    members_or_alpha_summary: str


@dataclass
class SensitivityReport:
    drops: List[int]
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["drop", "greedy_test_acc", "mehl_plus_test_acc"])


@dataclass
class ConvergenceReport:
    T_list: List[int]
    min_grad_norm_sq: List[float]
    slope: Optional[float]
    trace: List[TraceEntry]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "T": self.T_list,
            "min_grad_norm_sq": self.min_grad_norm_sq,
            "loglog_slope": [self.slope] * len(self.T_list),
        })


@dataclass
class CosineReport:
    mean_raw_cos: Optional[float]
    mean_centered_cos: Optional[float]
    raw_pairs: int = 0
    centered_pairs: int = 0
    excluded_pairs: int = 0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"basis": "raw", "mean_cos": self.mean_raw_cos, "pairs": self.raw_pairs},
            {"basis": "centered", "mean_cos": self.mean_centered_cos, "pairs": self.centered_pairs},
        ])


def _shape_of_run(method: str, store: CheckpointStore, cfg: SoupTrainConfig) -> Tuple[int, int, int]:
    """报告里的 (b, T, J)；不训练系数的方法记为 0。"""
    k = len(store)
    if method in ("mehl", "mehl-plus"):
        return cfg.model_batch, cfg.resolve_outer_iters(k), cfg.inner_iters
    if method in ("hl", "hl-plus", "learned-softmax", "learned-softmax-plus"):
        return k, 1, cfg.inner_iters
    return 0, 0, 0


def _summary(result: SoupResult) -> str:
    if result.members is not None:
        return "members=" + ";".join(str(m) for m in result.members)
    eff = result.effective
    return f"eff_min={eff.min():.6g};eff_max={eff.max():.6g}"


def run_bench(
    method: str,
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
    test: Dataset,
    cfg: SoupTrainConfig,
    engine: Optional[SoupEngine] = None,
) -> Tuple[BenchReport, SoupResult]:
    """运行一次 soup 方法，记录耗时、常驻峰值与 val/test 准确率。"""
    engine = engine or SoupEngine()
    engine.check_method(method)
    store.reset_peak()
    start = time.perf_counter()
    result = engine.run(method, store, spec, val, cfg)
    wall = time.perf_counter() - start
    b, t, j = _shape_of_run(method, store, cfg)
    report = BenchReport(
        method=method,
        K=len(store),
        b=b,
        T=t,
        J=j,
        wall_seconds=wall,
        peak_resident_vectors=store.peak_resident,
        val_acc=accuracy(spec, result.soup, val),
        test_acc=accuracy(spec, result.soup, test),
        members_or_alpha_summary=_summary(result),
    )
    logger.info(
        f"bench {method}: wall={wall:.3f}s, peak={report.peak_resident_vectors}, "
        f"val_acc={report.val_acc:.4f}, test_acc={report.test_acc:.4f}"
    )
    return report, result


def convergence_trace(
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
    cfg: SoupTrainConfig,
    T_list: Sequence[int],
    block_size: Optional[int] = None,
) -> ConvergenceReport:
    """
    只跑一次 T_max = max(T_list) 的 MEHL-Soup；每个 T 取前 T 个边界 ‖∇α L‖² 的最小值，
    所以 T 越大数值不会变大。斜率为 log-log 最小二乘拟合。
    运行时固定 weight_decay=0，cfg 中的权重衰减不生效。
    """
    if spec.hidden_dims:
        raise ValueError("convergence_trace 需要无隐藏层的线性模型")
    T_list = sorted(set(int(t) for t in T_list))
    if not T_list or T_list[0] < 1:
        raise ValueError(f"T_list 必须是正整数列表，收到 {T_list}")

    run_cfg = cfg.model_copy(update={"weight_decay": 0.0})
    result = mehl_soup(store, spec, val, run_cfg, layerwise=False,
                       block_size=block_size or min(cfg.model_batch, len(store)),
                       outer_iters=T_list[-1], method="mehl")
    norms = np.array([e.grad_norm_sq for e in result.trace])
    prefix_min = np.minimum.accumulate(norms)
    mins = [float(prefix_min[t - 1]) for t in T_list]

    slope = None
    if len(T_list) >= 2 and all(m > 0 for m in mins):
        slope = float(np.polyfit(np.log(T_list), np.log(mins), 1)[0])
    logger.info(f"收敛轨迹: T={T_list}, min‖∇α‖²={mins}, slope={slope}")
    return ConvergenceReport(T_list, mins, slope, result.trace)


def _mean_pairwise_cosine(store: CheckpointStore, centered: bool) -> Tuple[Optional[float], int, int]:
    """两层流式遍历所有 j<k 的组合，最多 2 个常驻向量。"""
    ids = store.ids
    total, used, excluded = 0.0, 0, 0
    for a, cid_j in enumerate(ids):
        with store.acquire([cid_j], centered=centered)[0] as outer:
            for cid_k, vec_k in store.stream(ids[a + 1:], centered=centered):
                cos = cosine_similarity(outer.vector, vec_k)
                if cos is None:
                    excluded += 1
                    logger.warning(f"检查点 {cid_j} 与 {cid_k} 的{'中心化' if centered else ''}向量范数为 0，跳过该组合")
                    continue
                total += cos
                used += 1
    return (total / used if used else None), used, excluded


def cosine_report(store: CheckpointStore) -> CosineReport:
    """原始 θ_k 与中心化 θ_k − θ̄ 两组向量的平均两两余弦相似度。"""
    if len(store) < 2:
        raise ValueError("cosine_report 至少需要 2 个检查点")
    raw, raw_pairs, raw_excluded = _mean_pairwise_cosine(store, centered=False)
    store.stage_center(mean_vector(store))
    try:
        centered, centered_pairs, centered_excluded = _mean_pairwise_cosine(store, centered=True)
    finally:
        store.clear_center()
    logger.info(f"平均余弦相似度: raw={raw}, centered={centered}")
    return CosineReport(raw, centered, raw_pairs, centered_pairs, raw_excluded + centered_excluded)


def rank_by_val_accuracy(store: CheckpointStore, spec: ModelSpec, val: Dataset) -> List[Tuple[int, float]]:
    """按验证集准确率降序排列（并列时 ID 小的在前）。"""
    scores = [(cid, accuracy(spec, vec, val)) for cid, vec in store.stream()]
    return sorted(scores, key=lambda item: (-item[1], item[0]))


def sensitivity_study(
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
    test: Dataset,
    drops: Sequence[int],
    cfg: SoupTrainConfig,
    engine: Optional[SoupEngine] = None,
) -> SensitivityReport:
    """去掉验证集上最好的 n 个模型后，分别运行 greedy 与 mehl-plus，记录 test 准确率。"""
    drops = [int(n) for n in drops]
    if any(n < 0 for n in drops) or any(b <= a for a, b in zip(drops, drops[1:])):
        raise ConfigError(f"drops 必须是严格递增的非负整数，收到 {drops}")
    if drops and drops[-1] >= len(store):
        raise ConfigError(f"drops 的最大值 {drops[-1]} 必须小于 K={len(store)}")
    engine = engine or SoupEngine()
    ranked = [cid for cid, _ in rank_by_val_accuracy(store, spec, val)]

    report = SensitivityReport(drops)
    for n in drops:
        remaining = sorted(ranked[n:])
        subset = store.subset(remaining)
        sub_cfg = cfg.model_copy(update={"model_batch": min(cfg.model_batch, len(remaining))})
        greedy = engine.run("greedy", subset, spec, val, sub_cfg)
        mehl_plus = engine.run("mehl-plus", subset, spec, val, sub_cfg)
        row = (n, accuracy(spec, greedy.soup, test), accuracy(spec, mehl_plus.soup, test))
        logger.info(f"敏感性 drop={n}: greedy={row[1]:.4f}, mehl-plus={row[2]:.4f}")
        report.rows.append(row)
    return report


def ablation_study(
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
    test: Dataset,
    cfg: SoupTrainConfig,
    b_list: Sequence[int] = (),
    T_list: Sequence[int] = (),
    J_list: Sequence[int] = (),
    engine: Optional[SoupEngine] = None,
) -> pd.DataFrame:
    """一次改变一个轴（b、T、J、是否去中心化），其余沿用 cfg，方法固定为 mehl-plus。"""
    engine = engine or SoupEngine()
    axes = [
        ("model_batch", [b for b in b_list if b <= len(store)]),
        ("outer_iters", list(T_list)),
        ("inner_iters", list(J_list)),
        ("decentralize", [True, False]),
    ]
    rows = []
    for axis, values in axes:
        for value in values:
            run_cfg = cfg.model_copy(update={axis: value})
            report, _ = run_bench("mehl-plus", store, spec, val, test, run_cfg, engine)
            rows.append({
                "axis": axis,
                "value": value,
                "val_acc": report.val_acc,
                "test_acc": report.test_acc,
                "wall_seconds": report.wall_seconds,
                "peak_resident_vectors": report.peak_resident_vectors,
            })
    return pd.DataFrame(rows, columns=["axis", "value", "val_acc", "test_acc", "wall_seconds",
                                       "peak_resident_vectors"])


def reference_rows(store: CheckpointStore, spec: ModelSpec, val: Dataset, test: Dataset) -> pd.DataFrame:
    """最佳单模型与 logit 集成的准确率（集成逐个流式加载模型）。"""
    best_id, best_val = rank_by_val_accuracy(store, spec, val)[0]
    with store.acquire([best_id])[0] as best:
        best_test = accuracy(spec, best.vector, test)
    ensemble_val = ensemble_accuracy(spec, (vec for _, vec in store.stream()), val)
    ensemble_test = ensemble_accuracy(spec, (vec for _, vec in store.stream()), test)
    return pd.DataFrame([
        {"reference": f"best-individual:{best_id}", "val_acc": best_val, "test_acc": best_test},
        {"reference": "ensemble", "val_acc": ensemble_val, "test_acc": ensemble_test},
    ])


def write_csv(frame: pd.DataFrame, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    return path


def bench_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in reports], columns=BENCH_COLUMNS)


def run_bench_suite(
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
    test: Dataset,
    cfg: SoupTrainConfig,
    settings: BenchSettings,
    out_dir: Union[str, os.PathLike],
    convergence_store: Optional[CheckpointStore] = None,
    convergence_spec: Optional[ModelSpec] = None,
) -> Dict[str, Path]:
    """
    按 settings 依次运行各项测量并写出 CSV。

    convergence 需要线性模型的 ingredient 池，由调用方通过 convergence_store/convergence_spec 提供。
    """
    out_dir = Path(out_dir)
    engine = SoupEngine()
    for method in settings.methods:
        engine.check_method(method)

    written: Dict[str, Path] = {}
    reports = [run_bench(m, store, spec, val, test, cfg, engine)[0] for m in settings.methods]
    written["bench"] = write_csv(bench_frame(reports), out_dir / "bench.csv")

    if len(store) >= 2:
        written["cosine"] = write_csv(cosine_report(store).frame(), out_dir / "cosine.csv")
    if settings.with_references:
        written["reference"] = write_csv(reference_rows(store, spec, val, test), out_dir / "reference.csv")
    if settings.sensitivity:
        report = sensitivity_study(store, spec, val, test, settings.sensitivity, cfg, engine)
        written["sensitivity"] = write_csv(report.frame(), out_dir / "sensitivity.csv")
    if settings.ablation:
        frame = ablation_study(store, spec, val, test, cfg, settings.ablation_model_batch,
                               settings.ablation_outer_iters, settings.ablation_inner_iters, engine)
        written["ablation"] = write_csv(frame, out_dir / "ablation.csv")
    if settings.convergence:
        if convergence_store is None or convergence_spec is None:
            raise ValueError("convergence 需要线性模型的 ingredient 池")
        report = convergence_trace(convergence_store, convergence_spec, val, cfg, settings.convergence)
        written["convergence"] = write_csv(report.frame(), out_dir / "convergence.csv")

    logger.info(f"bench 结果已写出: {', '.join(str(p) for p in written.values())}")
    return written
