# -*- coding: utf-8 -*-
"""
Soup 构造方法：Uniform、Greedy、softmax Learned-Soup、HL-Soup(+)、MEHL-Soup(+)。

HL-Soup 就是 b=K、T=1 的 MEHL-Soup，两者走同一个训练循环，
因此在相同种子下结果逐位一致。

MEHL-Soup 的常驻向量: b 个已加载的 d_k、θ★、θ_fix、∇θ，共 b+3 个；
θ̄ 暂存在磁盘上，加载时按层做差，不常驻内存。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from data.dataset import BatchSampler, Dataset
from models.mlp import ModelSpec, accuracy, evaluate, loss_and_gradient
from params.errors import ConfigError, TrainingDivergedError
from params.seeding import make_rng
from params.store import CheckpointStore, mean_vector
from params.vector import ParamVector, linear_combine
from soup.coefficients import (
    MixCoefficients,
    alpha_gradient,
    effective_coefficients,
    softmax_mixing_gradient,
    softmax_weights,
)
from soup.optimizer import SoupState, SoupTrainConfig, adamw_cosine_step, config_step

logger = logging.getLogger("SoupForge.soup")

StepCallback = Callable[[int, int, List[int], SoupState], None]


@dataclass
class TraceEntry:
    step: int
    val_loss: float
    grad_norm_sq: float


@dataclass
class SoupResult:
    method: str
    soup: ParamVector
    alpha: MixCoefficients
    effective: np.ndarray
    members: Optional[List[int]] = None
    trace: List[TraceEntry] = field(default_factory=list)
    initial_val_loss: Optional[float] = None
    final_val_loss: Optional[float] = None


class BlockSampler:
    """
    第 t 个外层迭代的模型块 K_t：从随机流 "soup/block/<t>" 无放回抽取 b 个行号，
    升序排列后使用。b=K 时就是全部行。
    """

    def __init__(self, num_models: int, block_size: int, seed: int):
        if not 1 <= block_size <= num_models:
            raise ConfigError(f"model_batch 必须在 [1, {num_models}] 内，收到 {block_size}")
        self.num_models = num_models
        self.block_size = block_size
        self.seed = seed

    def sample(self, t: int) -> List[int]:
        rng = make_rng(self.seed, f"soup/block/{t}")
        rows = rng.choice(self.num_models, size=self.block_size, replace=False)
        return sorted(int(r) for r in rows)


def _check_finite_loss(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{where} 验证集损失出现 NaN/Inf")


# --- Uniform ---
def uniform_soup(store: CheckpointStore, spec: Optional[ModelSpec] = None, val: Optional[Dataset] = None,
                 cfg: Optional[SoupTrainConfig] = None) -> SoupResult:
    """θ̄ = (1/K)Σθ_k，流式计算；α 全为 0。"""
    soup = mean_vector(store)
    alpha = MixCoefficients.full(store.ids, store.layer_map.layer_count, layerwise=False)
    return SoupResult("uniform", soup, alpha, effective_coefficients(alpha))


# --- Greedy ---
def greedy_soup(store: CheckpointStore, spec: ModelSpec, val: Dataset,
                cfg: Optional[SoupTrainConfig] = None) -> SoupResult:
    """
    按验证集准确率降序（并列时 ID 小的优先）依次尝试加入 soup，
    新 soup 的验证准确率 ≥ 当前值时保留该模型。最多 3 个常驻向量。
    """
    scores = {cid: accuracy(spec, vec, val) for cid, vec in store.stream()}
    order = sorted(store.ids, key=lambda cid: (-scores[cid], cid))
    logger.info(f"greedy 排序: {[(cid, round(scores[cid], 4)) for cid in order]}")

    best = order[0]
    with store.acquire([best])[0] as handle:
        soup = handle.vector.copy()
    soup_handle = store.claim(soup, "soup")
    soup_acc = scores[best]
    members = [best]
    try:
        for cid in order[1:]:
            with store.acquire([cid])[0] as candidate:
                n = len(members) + 1
                trial = linear_combine(soup, [(1.0 / n, candidate.vector), (-1.0 / n, soup)], store.layer_map)
                with store.claim(trial, "trial"):
                    trial_acc = accuracy(spec, trial, val)
                    if trial_acc >= soup_acc:
                        soup[...] = trial
                        soup_acc = trial_acc
                        members.append(cid)
    finally:
        soup_handle.release()

    weights = np.array([[1.0 / len(members) if cid in members else 0.0] for cid in store.ids])
    alpha = MixCoefficients(weights, store.ids, layerwise=False)
    logger.info(f"greedy soup 成员: {members} (val_acc={soup_acc:.4f})")
    return SoupResult("greedy", soup, alpha, effective_coefficients(alpha), members=members)


# --- HL / MEHL ---
def _boundary_trace(store: CheckpointStore, spec: ModelSpec, val: Dataset, theta_star: ParamVector,
                    alpha: MixCoefficients, centered: bool, cfg: SoupTrainConfig) -> Tuple[float, float]:
    """外层迭代边界: 全验证集损失与 ‖∇α L‖²（逐个流式加载全部 K 个模型）。"""
    value, grad = loss_and_gradient(spec, theta_star, val, cfg.label_smoothing)
    _check_finite_loss(value.value, "边界评估时")
    norm_sq = 0.0
    with store.claim(grad, "grad"):
        for cid, d in store.stream(centered=centered):
            g = alpha_gradient(grad, [(cid, d)], store.layer_map, alpha.layerwise)
            norm_sq += float(np.sum(g * g))
    return value.value, norm_sq


def mehl_soup(
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
    cfg: SoupTrainConfig,
    layerwise: bool = False,
    block_size: Optional[int] = None,
    outer_iters: Optional[int] = None,
    step_callback: Optional[StepCallback] = None,
    method: Optional[str] = None,
) -> SoupResult:
    """
    块坐标下降训练混合系数。

    每个外层迭代 t: 抽取模型块 K_t 并加载 d_k；θ_fix = θ★ − Σ_{k∈K_t} α_k ⊙ d_k；
    之后 J 个内层步只更新块内系数，θ★ = θ_fix + Σ_{k∈K_t} α_k ⊙ d_k。

    :param block_size: 覆盖 cfg.model_batch
    :param outer_iters: 覆盖 cfg.outer_iters
    :param step_callback: 每个内层步后调用 (t, j, block_rows, state)
    """
    num_models = len(store)
    b = block_size or cfg.model_batch
    sampler = BlockSampler(num_models, b, cfg.seed)
    num_outer = outer_iters or cfg.resolve_outer_iters(num_models, b)
    num_inner = cfg.inner_iters
    total_steps = num_outer * num_inner
    layer_map = store.layer_map
    centered = cfg.decentralize
    if method is None:
        method = "mehl-plus" if layerwise else "mehl"

    with store.budget(b + 3):
        theta_star = mean_vector(store)
        star_handle = store.claim(theta_star, "theta_star")
        theta_fix = np.empty_like(theta_star)
        fix_handle = store.claim(theta_fix, "theta_fix")
        try:
            if centered:
                store.stage_center(theta_star)
                alpha = MixCoefficients.full(store.ids, layer_map.layer_count, layerwise)
            else:
                alpha = MixCoefficients.full(store.ids, layer_map.layer_count, layerwise, value=1.0 / num_models)
            state = SoupState.initial(alpha)
            state.theta_star, state.theta_fix = theta_star, theta_fix

            initial_loss = evaluate(spec, theta_star, val, cfg.label_smoothing).value
            _check_finite_loss(initial_loss, "初始")
            data = BatchSampler(len(val), cfg.data_batch, cfg.seed, "soup/data")
            trace: List[TraceEntry] = []

            for t in range(1, num_outer + 1):
                block = sampler.sample(t)
                handles = store.acquire([store.ids[r] for r in block], centered=centered)
                try:
                    diffs = [(h.checkpoint_id, h.vector) for h in handles]
                    if cfg.reset_adam_per_block:
                        state.reset_rows(block)
                    linear_combine(theta_star, [(-alpha.row(r), h.vector) for r, h in zip(block, handles)],
                                   layer_map, out=theta_fix)

                    for j in range(1, num_inner + 1):
                        linear_combine(theta_fix, [(alpha.row(r), h.vector) for r, h in zip(block, handles)],
                                       layer_map, out=theta_star)
                        batch = val.slice(data.next_indices())
                        value, grad = loss_and_gradient(spec, theta_star, batch, cfg.label_smoothing)
                        _check_finite_loss(value.value, f"外层 {t} 内层 {j}")
                        with store.claim(grad, "grad"):
                            g = alpha_gradient(grad, diffs, layer_map, layerwise)
                        config_step(state, g, block, cfg, total_steps)
                        if step_callback is not None:
                            step_callback(t, j, block, state)

                    linear_combine(theta_fix, [(alpha.row(r), h.vector) for r, h in zip(block, handles)],
                                   layer_map, out=theta_star)
                finally:
                    store.release(handles)

                val_loss, norm_sq = _boundary_trace(store, spec, val, theta_star, alpha, centered, cfg)
                trace.append(TraceEntry(t * num_inner, val_loss, norm_sq))
                logger.debug(f"{method} 外层 {t}/{num_outer}: block={block}, val_loss={val_loss:.6f}")
        finally:
            store.clear_center()
            fix_handle.release()
            star_handle.release()

    effective = effective_coefficients(alpha) if centered else alpha.values.copy()
    logger.info(
        f"{method} 完成: K={num_models}, b={b}, T={num_outer}, J={num_inner}, "
        f"val_loss {initial_loss:.6f} -> {trace[-1].val_loss:.6f}, peak_resident={store.peak_resident}"
    )
    return SoupResult(method, theta_star, alpha, effective, trace=trace,
                      initial_val_loss=initial_loss, final_val_loss=trace[-1].val_loss)


def hl_soup(store: CheckpointStore, spec: ModelSpec, val: Dataset, cfg: SoupTrainConfig,
            layerwise: bool = False, step_callback: Optional[StepCallback] = None) -> SoupResult:
    """全部 K 个模型同时加载的 HL-Soup(+)，等价于 b=K、T=1 的 MEHL-Soup(+)。"""
    return mehl_soup(store, spec, val, cfg, layerwise, block_size=len(store), outer_iters=1,
                     step_callback=step_callback, method="hl-plus" if layerwise else "hl")


# --- softmax Learned-Soup ---
def learned_soup_softmax(store: CheckpointStore, spec: ModelSpec, val: Dataset, cfg: SoupTrainConfig,
                         layerwise: bool = False) -> SoupResult:
    """
    θ★ = Σ_k softmax(z)_k ⊙ θ_k（按列 softmax），z 初始为 0。
    与 HL-Soup 相同的优化器与调度，学习率和权重衰减取 softmax_lr / softmax_weight_decay。
    """
    num_models = len(store)
    layer_map = store.layer_map
    num_inner = cfg.inner_iters
    method = "learned-softmax-plus" if layerwise else "learned-softmax"

    with store.budget(num_models + 3):
        handles = store.acquire(store.ids, centered=False)
        theta_star = np.zeros(layer_map.total_len, dtype=np.float64)
        star_handle = store.claim(theta_star, "theta_star")
        try:
            models = [(h.checkpoint_id, h.vector) for h in handles]
            z = MixCoefficients.full(store.ids, layer_map.layer_count, layerwise)
            state = SoupState.initial(z)
            rows = list(range(num_models))

            def _combine(weights: np.ndarray) -> None:
                theta_star.fill(0.0)
                linear_combine(theta_star, [(weights[r], vec) for r, (_, vec) in enumerate(models)],
                               layer_map, out=theta_star)

            _combine(softmax_weights(z.values))
            initial_loss = evaluate(spec, theta_star, val, cfg.label_smoothing).value
            _check_finite_loss(initial_loss, "初始")
            data = BatchSampler(len(val), cfg.data_batch, cfg.seed, "soup/data")

            for j in range(1, num_inner + 1):
                weights = softmax_weights(z.values)
                _combine(weights)
                batch = val.slice(data.next_indices())
                value, grad = loss_and_gradient(spec, theta_star, batch, cfg.label_smoothing)
                _check_finite_loss(value.value, f"内层 {j}")
                with store.claim(grad, "grad"):
                    gz = softmax_mixing_gradient(weights, alpha_gradient(grad, models, layer_map, layerwise))
                adamw_cosine_step(state, gz, rows, num_inner, lr=cfg.softmax_lr,
                                  weight_decay=cfg.softmax_weight_decay, beta1=cfg.adam_beta1,
                                  beta2=cfg.adam_beta2, eps=cfg.adam_eps)

            weights = softmax_weights(z.values)
            _combine(weights)
            value, grad = loss_and_gradient(spec, theta_star, val, cfg.label_smoothing)
            _check_finite_loss(value.value, "最终")
            with store.claim(grad, "grad"):
                gz = softmax_mixing_gradient(weights, alpha_gradient(grad, models, layer_map, layerwise))
            trace = [TraceEntry(num_inner, value.value, float(np.sum(gz * gz)))]
        finally:
            star_handle.release()
            store.release(handles)

    logger.info(f"{method} 完成: K={num_models}, J={num_inner}, val_loss {initial_loss:.6f} -> {value.value:.6f}")
    return SoupResult(method, theta_star, z, weights, trace=trace,
                      initial_val_loss=initial_loss, final_val_loss=value.value)
