# -*- coding: utf-8 -*-
import numpy as np
import pytest

from conftest import make_store
from params.checkpoint import write_checkpoint
from params.errors import BudgetViolationError, CheckpointNotFoundError, LayerMapMismatchError
from params.store import CheckpointStore, mean_vector, write_manifest
from params.vector import LayerMap


@pytest.fixture
def layer_map():
    return LayerMap.from_shapes([("w0", (2, 2)), ("b0", (2,))])


@pytest.fixture
def vectors():
    return list(np.random.default_rng(3).standard_normal((5, 6)))


def test_open_assigns_ids_in_manifest_order(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    assert store.ids == [1, 2, 3, 4, 5]
    assert len(store) == 5
    assert store.layer_map == layer_map
    with pytest.raises(CheckpointNotFoundError):
        store.path(6)


def test_open_rejects_mismatched_layer_maps(tmp_path, layer_map):
    write_checkpoint(layer_map, np.zeros(6), tmp_path / "a.ckpt")
    write_checkpoint(LayerMap.from_shapes([("w0", (3, 2))]), np.zeros(6), tmp_path / "b.ckpt")
    write_manifest(tmp_path, ["a.ckpt", "b.ckpt"])
    with pytest.raises(LayerMapMismatchError):
        CheckpointStore.open(tmp_path)


def test_open_missing_checkpoint(tmp_path, layer_map):
    write_checkpoint(layer_map, np.zeros(6), tmp_path / "a.ckpt")
    write_manifest(tmp_path, ["a.ckpt", "missing.ckpt"])
    with pytest.raises(FileNotFoundError):
        CheckpointStore.open(tmp_path)


def test_acquire_and_release_track_residency(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    handles = store.acquire([2, 4])
    assert store.resident_count == 2
    assert np.array_equal(handles[0].vector, vectors[1])
    with pytest.raises(ValueError):
        handles[0].vector[0] = 1.0  # 只读
    store.release(handles)
    store.release(handles)  # 幂等
    assert store.resident_count == 0
    assert store.peak_resident == 2


def test_ceiling_is_enforced_without_leaking(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors, residency_ceiling=2)
    with store.acquire([1])[0]:
        with pytest.raises(BudgetViolationError):
            store.acquire([2, 3])
        assert store.resident_count == 1
    assert store.resident_count == 0


def test_budget_context(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    with store.budget(1):
        with store.claim(np.zeros(6), "work"):
            with pytest.raises(BudgetViolationError):
                store.acquire([1])
    handles = store.acquire([1, 2, 3])
    store.release(handles)


def test_mean_vector_streams(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    assert np.allclose(mean_vector(store), np.mean(vectors, axis=0), rtol=0, atol=1e-14)
    assert store.peak_resident == 2
    assert store.resident_count == 0


def test_mean_of_identical_vectors_is_exact(tmp_path, layer_map):
    vec = np.random.default_rng(9).standard_normal(6)
    store = make_store(tmp_path, layer_map, [vec] * 7)
    assert np.array_equal(mean_vector(store), vec)


def test_centered_acquire(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    with pytest.raises(RuntimeError):
        store.acquire([1], centered=True)
    center = mean_vector(store)
    store.stage_center(center)
    try:
        with store.acquire([3], centered=True)[0] as handle:
            assert handle.centered
            assert np.array_equal(handle.vector, vectors[2] - center)
            assert store.resident_count == 1
    finally:
        store.clear_center()


def test_subset_shares_counters(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    subset = store.subset([2, 5])
    assert subset.ids == [2, 5]
    with subset.acquire([5])[0] as handle:
        assert np.array_equal(handle.vector, vectors[4])
        assert store.resident_count == 1


def test_stream_holds_one_vector(tmp_path, layer_map, vectors):
    store = make_store(tmp_path, layer_map, vectors)
    seen = []
    for cid, vec in store.stream():
        assert store.resident_count == 1
        seen.append((cid, vec.copy()))
    assert [cid for cid, _ in seen] == store.ids
    assert store.peak_resident == 1
