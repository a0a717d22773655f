# -*- coding: utf-8 -*-
import numpy as np
import pandas as pd
import pytest

from bench.bench_runner import (
    BENCH_COLUMNS,
    BenchSettings,
    ablation_study,
    convergence_trace,
    cosine_report,
    rank_by_val_accuracy,
    reference_rows,
    run_bench,
    run_bench_suite,
    sensitivity_study,
)
from conftest import build_pool, make_store
from models.mlp import ModelSpec
from params.errors import ConfigError
from params.store import CheckpointStore
from params.vector import LayerMap
from soup.optimizer import SoupTrainConfig
from soup.soup_engine import METHODS


@pytest.fixture
def splits(small_pool):
    return small_pool.splits


def test_run_bench_uniform(store, small_pool, splits, soup_cfg):
    report, result = run_bench("uniform", store, small_pool.spec, splits["validation"], splits["test"], soup_cfg)
    assert (report.K, report.b, report.T, report.J) == (8, 0, 0, 0)
    assert report.peak_resident_vectors == 2
    assert 0.0 <= report.test_acc <= 1.0
    assert report.wall_seconds >= 0.0
    assert result.method == "uniform"


def test_run_bench_mehl_reports_shape_and_peak(store, small_pool, splits, soup_cfg):
    report, _ = run_bench("mehl-plus", store, small_pool.spec, splits["validation"], splits["test"], soup_cfg)
    assert (report.b, report.T, report.J) == (2, 4, 10)
    assert report.peak_resident_vectors == 5
    assert report.members_or_alpha_summary.startswith("eff_min=")


def test_run_bench_greedy_summary(store, small_pool, splits, soup_cfg):
    report, result = run_bench("greedy", store, small_pool.spec, splits["validation"], splits["test"], soup_cfg)
    assert report.members_or_alpha_summary == "members=" + ";".join(str(m) for m in result.members)


def test_cosine_report(store):
    report = cosine_report(store)
    assert report.raw_pairs == report.centered_pairs == 8 * 7 // 2
    assert report.excluded_pairs == 0
    assert report.mean_centered_cos < report.mean_raw_cos
    assert list(report.frame()["basis"]) == ["raw", "centered"]
    assert store.resident_count == 0


def test_rank_by_val_accuracy(store, small_pool, splits):
    ranked = rank_by_val_accuracy(store, small_pool.spec, splits["validation"])
    assert sorted(cid for cid, _ in ranked) == store.ids
    keys = [(-acc, cid) for cid, acc in ranked]
    assert keys == sorted(keys)


def test_sensitivity_study(store, small_pool, splits, soup_cfg):
    report = sensitivity_study(store, small_pool.spec, splits["validation"], splits["test"], [0, 2, 6], soup_cfg)
    frame = report.frame()
    assert list(frame.columns) == ["drop", "greedy_test_acc", "mehl_plus_test_acc"]
    assert list(frame["drop"]) == [0, 2, 6]
    with pytest.raises(ConfigError):
        sensitivity_study(store, small_pool.spec, splits["validation"], splits["test"], [2, 1], soup_cfg)
    with pytest.raises(ConfigError):
        sensitivity_study(store, small_pool.spec, splits["validation"], splits["test"], [8], soup_cfg)


def test_ablation_study_axes(store, small_pool, splits, soup_cfg):
    cfg = soup_cfg.model_copy(update={"inner_iters": 3})
    frame = ablation_study(store, small_pool.spec, splits["validation"], splits["test"], cfg,
                           b_list=[1, 4, 16], T_list=[1, 2], J_list=[2])
    assert list(frame["axis"]) == ["model_batch", "model_batch", "outer_iters", "outer_iters",
                                   "inner_iters", "decentralize", "decentralize"]
    peaks = frame[frame["axis"] == "model_batch"]["peak_resident_vectors"].tolist()
    assert peaks == [4, 7]


def test_reference_rows(store, small_pool, splits):
    frame = reference_rows(store, small_pool.spec, splits["validation"], splits["test"])
    assert frame["reference"].iloc[0].startswith("best-individual:")
    assert frame["reference"].iloc[1] == "ensemble"


def test_convergence_trace_prefix_minimum(linear_pool, soup_cfg):
    store = CheckpointStore.open(linear_pool.root)
    cfg = soup_cfg.model_copy(update={"inner_iters": 5})
    report = convergence_trace(store, linear_pool.spec, linear_pool.splits["validation"], cfg, [8, 2, 4])
    assert report.T_list == [2, 4, 8]
    assert len(report.trace) == 8
    assert report.min_grad_norm_sq[0] >= report.min_grad_norm_sq[1] >= report.min_grad_norm_sq[2]
    norms = [e.grad_norm_sq for e in report.trace]
    assert report.min_grad_norm_sq[2] == min(norms)
    assert report.slope is not None
    assert list(report.frame().columns) == ["T", "min_grad_norm_sq", "loglog_slope"]


def test_convergence_trace_ignores_weight_decay(linear_pool, soup_cfg):
    store = CheckpointStore.open(linear_pool.root)
    val = linear_pool.splits["validation"]
    cfg = soup_cfg.model_copy(update={"inner_iters": 3})
    plain = convergence_trace(store, linear_pool.spec, val, cfg.model_copy(update={"weight_decay": 0.0}), [2, 4])
    decayed = convergence_trace(store, linear_pool.spec, val, cfg.model_copy(update={"weight_decay": 0.5}), [2, 4])
    assert decayed.min_grad_norm_sq == plain.min_grad_norm_sq


def test_convergence_trace_needs_a_linear_model(store, small_pool, soup_cfg):
    with pytest.raises(ValueError):
        convergence_trace(store, small_pool.spec, small_pool.splits["validation"], soup_cfg, [2, 4])


def test_run_bench_suite_writes_reports(tmp_path, store, small_pool, splits, soup_cfg):
    settings = BenchSettings(methods=["uniform", "greedy", "mehl"], sensitivity=[0, 2], with_references=True)
    written = run_bench_suite(store, small_pool.spec, splits["validation"], splits["test"], soup_cfg,
                              settings, tmp_path)
    assert set(written) == {"bench", "cosine", "reference", "sensitivity"}
    bench = pd.read_csv(written["bench"])
    assert list(bench.columns) == BENCH_COLUMNS
    assert list(bench["method"]) == ["uniform", "greedy", "mehl"]
    assert b"\r\n" not in written["bench"].read_bytes()
    assert len(pd.read_csv(written["sensitivity"])) == 2


def test_default_bench_covers_every_method(tmp_path, store, small_pool, splits, soup_cfg):
    written = run_bench_suite(store, small_pool.spec, splits["validation"], splits["test"], soup_cfg,
                              BenchSettings(), tmp_path)
    bench = pd.read_csv(written["bench"])
    assert len(bench) == 8
    assert list(bench["method"]) == list(METHODS)
    assert set(written) == {"bench", "cosine"}


def test_cosine_report_on_orthogonal_pair(tmp_path):
    layer_map = LayerMap.from_shapes([("w0", (2,))])
    store = make_store(tmp_path, layer_map, [[1.0, 0.0], [0.0, 1.0]])
    report = cosine_report(store)
    assert report.mean_raw_cos == pytest.approx(0.0, abs=1e-15)
    assert report.mean_centered_cos == pytest.approx(-1.0, abs=1e-15)
    assert (report.raw_pairs, report.centered_pairs, report.excluded_pairs) == (1, 1, 0)


def test_cosine_report_skips_zero_centered_vectors(tmp_path):
    layer_map = LayerMap.from_shapes([("w0", (3,))])
    store = make_store(tmp_path, layer_map, [[1.0, 2.0, 3.0]] * 3)
    report = cosine_report(store)
    assert report.mean_raw_cos == pytest.approx(1.0, abs=1e-15)
    assert report.mean_centered_cos is None
    assert (report.centered_pairs, report.excluded_pairs) == (0, 3)
    assert store.resident_count == 0


@pytest.mark.slow
def test_convergence_slope_is_negative(tmp_path):
    slopes = []
    for seed in range(3):
        pool = build_pool(tmp_path / f"pool_{seed}", ModelSpec(hidden_dims=[]), k=16, seed=seed)
        store = CheckpointStore.open(pool.root)
        cfg = SoupTrainConfig(model_batch=4, inner_iters=20, seed=seed)
        report = convergence_trace(store, pool.spec, pool.splits["validation"], cfg, [4, 16, 64, 256])
        slopes.append(report.slope)
    assert np.mean(slopes) <= -0.4


@pytest.mark.slow
def test_mehl_plus_is_robust_against_top_model_removal(tmp_path):
    beats_uniform, robust = 0, 0
    for seed in range(5):
        pool = build_pool(tmp_path / f"pool_{seed}", ModelSpec(), k=16, seed=seed)
        store = CheckpointStore.open(pool.root)
        val, test = pool.splits["validation"], pool.splits["test"]
        cfg = SoupTrainConfig(seed=seed)
        uniform, _ = run_bench("uniform", store, pool.spec, val, test, cfg)
        mehl_plus, _ = run_bench("mehl-plus", store, pool.spec, val, test, cfg)
        beats_uniform += mehl_plus.test_acc >= uniform.test_acc
        frame = sensitivity_study(store, pool.spec, val, test, [0, 2], cfg).frame()
        greedy_drop = frame["greedy_test_acc"].iloc[0] - frame["greedy_test_acc"].iloc[1]
        mehl_drop = frame["mehl_plus_test_acc"].iloc[0] - frame["mehl_plus_test_acc"].iloc[1]
        robust += mehl_drop <= greedy_drop
    assert beats_uniform >= 4
    assert robust >= 3
