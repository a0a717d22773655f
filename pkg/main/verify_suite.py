# -*- coding: utf-8 -*-
"""
不变量校验集（verify 子命令）。

在临时目录里生成一个小的 ingredient 池（K=8，MLP 8-16-3），逐项检查梯度、
系数恒等式、b=K 退化、块隔离、常驻上限、检查点格式和 greedy 保证。
"""
import logging
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from data.dataset import DataSpec, Dataset, generate_dataset
from finetune.ingredient_factory import FinetuneSettings, build_ingredients
from finetune.trainer import SearchGrid
from models.gradcheck import central_difference, fd_gradient, max_relative_error
from models.mlp import ModelSpec, accuracy, backward, gradient_fault, init_params, loss, forward
from params.checkpoint import read_checkpoint, write_checkpoint
from params.errors import ChecksumMismatchError
from params.seeding import make_rng
from params.store import CheckpointStore, mean_vector, write_manifest
from params.vector import LayerMap, linear_combine
from soup.coefficients import alpha_gradient, effective_coefficients, softmax_mixing_gradient, softmax_weights
from soup.methods import greedy_soup, hl_soup, mehl_soup
from soup.optimizer import SoupState, SoupTrainConfig

logger = logging.getLogger("SoupForge.verify")

# 有限差分步长：模型参数 / 混合系数
MODEL_FD_STEP = 1e-6
COEF_FD_STEP = 1e-7

# residency 检查：同一个 b 下比较两个池大小的峰值
RESIDENCY_BLOCK = 4
RESIDENCY_POOL_SIZES = (16, 32)

PROPERTIES: List[str] = [
    "model_gradient_relu",
    "model_gradient_tanh",
    "alpha_gradient_fd",
    "softmax_gradient_fd",
    "sum_to_one",
    "reduction_global",
    "reduction_layerwise",
    "block_isolation",
    "residency",
    "checkpoint_roundtrip",
    "crc_detection",
    "greedy_guarantee",
]


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


class VerifySuite:
    """按名称运行各项不变量检查；corrupt_grad=True 时在梯度注入故障。"""

    def __init__(self, seed: int = 0, num_models: int = 8, corrupt_grad: bool = False,
                 workdir: Optional[str] = None):
        self.seed = seed
        self.num_models = num_models
        self.corrupt_grad = corrupt_grad
        self._tmp = None if workdir else tempfile.TemporaryDirectory(prefix="soupforge_verify_")
        self.workdir = Path(workdir or self._tmp.name)
        self._pool: Optional[Tuple[CheckpointStore, ModelSpec, Dict[str, Dataset]]] = None
        self._checks: Dict[str, Callable[[], Tuple[bool, str]]] = {
            name: getattr(self, f"_check_{name}") for name in PROPERTIES
        }

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self) -> "VerifySuite":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    # --- 公共入口 ---
    def run(self, names: Optional[Sequence[str]] = None) -> List[PropertyResult]:
        names = list(names or PROPERTIES)
        unknown = [n for n in names if n not in self._checks]
        if unknown:
            raise ValueError(f"未知的校验项 {unknown}，可选: {PROPERTIES}")

        results = []
        for name in names:
            start = time.perf_counter()
            try:
                if self.corrupt_grad:
                    with gradient_fault():
                        passed, detail = self._checks[name]()
                else:
                    passed, detail = self._checks[name]()
            except Exception as e:
                logger.exception(f"校验项 {name} 执行出错")
                passed, detail = False, f"{type(e).__name__}: {e}"
            results.append(PropertyResult(name, passed, detail, time.perf_counter() - start))
            logger.info(f"verify {name}: {'PASS' if passed else 'FAIL'} ({detail})")
        return results

    # --- 共享的小 ingredient 池 ---
    def _get_pool(self) -> Tuple[CheckpointStore, ModelSpec, Dict[str, Dataset]]:
        if self._pool is None:
            data_spec = DataSpec(n_train=240, n_val=90, n_test=150, seed=self.seed)
            splits = generate_dataset(data_spec)
            spec = ModelSpec()
            settings = FinetuneSettings(
                k=self.num_models, master_seed=self.seed, pretrain_epochs=3,
                grid=SearchGrid(epochs=[1, 2, 3]),
            )
            build_ingredients(splits["train"], spec, settings, self.workdir / "pool")
            store = CheckpointStore.open(self.workdir / "pool")
            self._pool = (store, spec, splits)
        return self._pool

    def _soup_config(self, seed: int, **overrides) -> SoupTrainConfig:
        values = dict(model_batch=2, inner_iters=15, data_batch=32, seed=seed)
        values.update(overrides)
        return SoupTrainConfig(**values)

    # --- 模型梯度 ---
    def _model_gradient(self, activation: str) -> Tuple[bool, str]:
        spec = ModelSpec(activation=activation)
        worst = 0.0
        for trial in range(10):
            rng = make_rng(self.seed, f"verify/grad/{activation}/{trial}")
            params = init_params(spec, rng)
            params += 0.1 * rng.standard_normal(params.shape[0])
            batch = Dataset(rng.standard_normal((16, spec.input_dim)), rng.integers(0, spec.num_classes, 16))
            smoothing = 0.1 if trial % 2 else 0.0
            analytic = backward(spec, params, batch, smoothing)
            coords = set(rng.choice(spec.num_params, size=20, replace=False).tolist())
            coords.add(int(np.argmax(np.abs(analytic))))
            coords = sorted(coords)
            numeric = fd_gradient(spec, params, batch, smoothing, h=MODEL_FD_STEP, indices=coords)
            worst = max(worst, max_relative_error(analytic[coords], numeric))
        return worst < 1e-6, f"max_rel_err={worst:.3e}"

    def _check_model_gradient_relu(self) -> Tuple[bool, str]:
        return self._model_gradient("relu")

    def _check_model_gradient_tanh(self) -> Tuple[bool, str]:
        return self._model_gradient("tanh")

    # --- α / z 梯度 ---
    def _load_all(self, centered: bool):
        store, spec, splits = self._get_pool()
        if centered:
            store.stage_center(mean_vector(store))
        try:
            handles = store.acquire(store.ids, centered=centered)
        finally:
            if centered:
                store.clear_center()
        return store, spec, splits, handles

    def _check_alpha_gradient_fd(self) -> Tuple[bool, str]:
        store, spec, splits, handles = self._load_all(centered=True)
        try:
            theta_bar = mean_vector(store)
            layer_map = store.layer_map
            diffs = [(h.checkpoint_id, h.vector) for h in handles]
            batch = splits["validation"].slice(np.arange(48))
            worst = 0.0
            for trial in range(10):
                layerwise = bool(trial % 2)
                rng = make_rng(self.seed, f"verify/alpha/{trial}")
                cols = layer_map.layer_count if layerwise else 1
                alpha = 0.3 * rng.standard_normal((len(diffs), cols))

                def _theta(a: np.ndarray) -> np.ndarray:
                    a = a.reshape(len(diffs), cols)
                    return linear_combine(theta_bar, [(a[r], d) for r, (_, d) in enumerate(diffs)], layer_map)

                def _loss(a: np.ndarray) -> float:
                    return loss(forward(spec, _theta(a), batch), batch.labels).value

                grad = backward(spec, _theta(alpha.ravel()), batch)
                analytic = alpha_gradient(grad, diffs, layer_map, layerwise).ravel()
                numeric = central_difference(_loss, alpha.ravel(), h=COEF_FD_STEP)
                worst = max(worst, max_relative_error(analytic, numeric))
        finally:
            store.release(handles)
        return worst < 1e-5, f"max_rel_err={worst:.3e}"

    def _check_softmax_gradient_fd(self) -> Tuple[bool, str]:
        store, spec, splits, handles = self._load_all(centered=False)
        try:
            layer_map = store.layer_map
            models = [(h.checkpoint_id, h.vector) for h in handles]
            batch = splits["validation"].slice(np.arange(48))
            zero = np.zeros(layer_map.total_len)
            worst = 0.0
            for trial in range(4):
                layerwise = bool(trial % 2)
                rng = make_rng(self.seed, f"verify/softmax/{trial}")
                cols = layer_map.layer_count if layerwise else 1
                z = rng.standard_normal((len(models), cols))

                def _theta(flat: np.ndarray) -> np.ndarray:
                    w = softmax_weights(flat.reshape(len(models), cols))
                    return linear_combine(zero, [(w[r], v) for r, (_, v) in enumerate(models)], layer_map)

                def _loss(flat: np.ndarray) -> float:
                    return loss(forward(spec, _theta(flat), batch), batch.labels).value

                weights = softmax_weights(z)
                grad = backward(spec, _theta(z.ravel()), batch)
                analytic = softmax_mixing_gradient(weights, alpha_gradient(grad, models, layer_map, layerwise)).ravel()
                numeric = central_difference(_loss, z.ravel(), h=COEF_FD_STEP)
                worst = max(worst, max_relative_error(analytic, numeric))
        finally:
            store.release(handles)
        return worst < 1e-5, f"max_rel_err={worst:.3e}"

    # --- 系数恒等式与退化 ---
    def _check_sum_to_one(self) -> Tuple[bool, str]:
        store, spec, splits = self._get_pool()
        worst = 0.0
        for layerwise in (False, True):
            for run in (mehl_soup(store, spec, splits["validation"], self._soup_config(self.seed), layerwise),
                        hl_soup(store, spec, splits["validation"], self._soup_config(self.seed), layerwise)):
                sums = effective_coefficients(run.alpha).sum(axis=0)
                worst = max(worst, float(np.max(np.abs(sums - 1.0))))
        return worst <= 1e-12, f"max|Σ−1|={worst:.3e}"

    def _reduction(self, layerwise: bool) -> Tuple[bool, str]:
        store, spec, splits = self._get_pool()
        mismatches = []
        for seed in (1, 2, 3):
            cfg = self._soup_config(seed)
            hl = hl_soup(store, spec, splits["validation"], cfg, layerwise)
            mehl = mehl_soup(store, spec, splits["validation"], cfg, layerwise,
                             block_size=len(store), outer_iters=1)
            if not (np.array_equal(hl.soup, mehl.soup) and np.array_equal(hl.alpha.values, mehl.alpha.values)):
                mismatches.append(seed)
        return not mismatches, f"mismatched seeds={mismatches}" if mismatches else "3 seeds bitwise equal"

    def _check_reduction_global(self) -> Tuple[bool, str]:
        return self._reduction(layerwise=False)

    def _check_reduction_layerwise(self) -> Tuple[bool, str]:
        return self._reduction(layerwise=True)

    def _check_block_isolation(self) -> Tuple[bool, str]:
        store, spec, splits = self._get_pool()
        violations = []
        last: Dict[str, np.ndarray] = {}

        def _snapshot(state: SoupState) -> Dict[str, np.ndarray]:
            return {"alpha": state.alpha.values.copy(), "m": state.adam_m.copy(),
                    "v": state.adam_v.copy(), "steps": state.row_steps.copy()}

        def _callback(t: int, j: int, block: List[int], state: SoupState) -> None:
            current = _snapshot(state)
            if last:
                inactive = [r for r in range(state.alpha.num_models) if r not in block]
                for key, value in current.items():
                    if not np.array_equal(value[inactive], last[key][inactive]):
                        violations.append((t, j, key))
            last.update(current)

        cfg = self._soup_config(self.seed, outer_iters=4)
        mehl_soup(store, spec, splits["validation"], cfg, layerwise=True, block_size=2, step_callback=_callback)
        return not violations, f"violations={violations[:5]}" if violations else "inactive rows untouched"

    def _wide_pool(self, k: int) -> CheckpointStore:
        """在小池的检查点上加随机扰动，扩成 k 个检查点。"""
        store, _, _ = self._get_pool()
        root = self.workdir / f"pool_{k}"
        root.mkdir(exist_ok=True)
        names = []
        while len(names) < k:
            for _, vec in store.stream(store.ids[: k - len(names)]):
                rng = make_rng(self.seed, f"verify/wide/{len(names)}")
                names.append(f"model_{len(names):02d}.ckpt")
                write_checkpoint(store.layer_map, vec + 0.01 * rng.standard_normal(vec.shape[0]), root / names[-1])
        write_manifest(root, names)
        return CheckpointStore.open(root)

    def _check_residency(self) -> Tuple[bool, str]:
        _, spec, splits = self._get_pool()
        b = RESIDENCY_BLOCK
        wide = self._wide_pool(max(RESIDENCY_POOL_SIZES))
        cfg = self._soup_config(self.seed, inner_iters=3, outer_iters=2)
        peaks = []
        for k in RESIDENCY_POOL_SIZES:
            subset = wide.subset(wide.ids[:k])
            subset.reset_peak()
            mehl_soup(subset, spec, splits["validation"], cfg, True, block_size=b)
            peaks.append(subset.peak_resident)
        ok = len(set(peaks)) == 1 and max(peaks) <= b + 3
        return ok, f"peaks(K={RESIDENCY_POOL_SIZES})={peaks}, bound={b + 3}"

    # --- 检查点格式 ---
    def _check_checkpoint_roundtrip(self) -> Tuple[bool, str]:
        rng = make_rng(self.seed, "verify/roundtrip")
        path = self.workdir / "roundtrip.ckpt"
        for trial in range(100):
            shapes = [(f"layer{i}", tuple(int(d) for d in rng.integers(1, 5, size=rng.integers(1, 4))))
                      for i in range(int(rng.integers(1, 5)))]
            layer_map = LayerMap.from_shapes(shapes)
            params = rng.standard_normal(layer_map.total_len) * 10.0 ** rng.integers(-5, 6)
            write_checkpoint(layer_map, params, path)
            read_map, read_params = read_checkpoint(path)
            if read_map != layer_map or read_params.tobytes() != params.tobytes():
                return False, f"trial {trial} 不一致"
        return True, "100 instances bit-identical"

    def _check_crc_detection(self) -> Tuple[bool, str]:
        layer_map = LayerMap.from_shapes([("w", (3, 2)), ("b", (2,))])
        path = self.workdir / "corrupt.ckpt"
        write_checkpoint(layer_map, np.arange(layer_map.total_len, dtype=np.float64), path)
        raw = bytearray(path.read_bytes())
        raw[-8] ^= 0xFF
        path.write_bytes(bytes(raw))
        try:
            read_checkpoint(path)
        except ChecksumMismatchError:
            return True, "corrupted payload detected"
        return False, "corrupted payload was not detected"

    def _check_greedy_guarantee(self) -> Tuple[bool, str]:
        store, spec, splits = self._get_pool()
        val = splits["validation"]
        best = max(accuracy(spec, vec, val) for _, vec in store.stream())
        result = greedy_soup(store, spec, val)
        soup_acc = accuracy(spec, result.soup, val)
        return soup_acc >= best, f"greedy={soup_acc:.4f}, best_individual={best:.4f}, members={result.members}"
