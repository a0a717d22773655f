# -*- coding: utf-8 -*-
import numpy as np
import pytest
from pydantic import ValidationError

from data.dataset import (
    BatchSampler,
    DataSpec,
    Dataset,
    class_centers,
    generate_dataset,
    iter_epoch,
    read_dataset_csv,
    read_splits,
    write_dataset_csv,
    write_splits,
)
from params.errors import ShapeMismatchError


@pytest.fixture
def spec():
    return DataSpec(n_train=61, n_val=30, n_test=40, seed=3)


def test_generation_is_deterministic(spec):
    a, b = generate_dataset(spec), generate_dataset(spec)
    for role in ("train", "validation", "test"):
        assert np.array_equal(a[role].features, b[role].features)
        assert np.array_equal(a[role].labels, b[role].labels)
        assert a[role].role == role
    other = generate_dataset(spec.model_copy(update={"seed": 4}))
    assert not np.array_equal(a["train"].features, other["train"].features)


def test_splits_are_class_balanced(spec):
    splits = generate_dataset(spec)
    assert len(splits["train"]) == 61
    counts = np.bincount(splits["train"].labels, minlength=spec.num_classes)
    assert counts.max() - counts.min() <= 1


def test_zero_noise_puts_samples_on_centers(spec):
    spec = spec.model_copy(update={"stddev": 0.0})
    train = generate_dataset(spec)["train"]
    assert np.array_equal(train.features, class_centers(spec)[train.labels])


def test_degenerate_specs_are_rejected():
    with pytest.raises(ValidationError):
        DataSpec(num_classes=1)
    with pytest.raises(ValueError):
        generate_dataset(DataSpec(num_classes=5, n_train=4))


def test_csv_roundtrip(tmp_path, spec):
    train = generate_dataset(spec)["train"]
    path = write_dataset_csv(train, tmp_path / "train.csv")
    with open(path, "rb") as f:
        header = f.readline()
    assert header == b"f0,f1,f2,f3,f4,f5,f6,f7,label\n"
    assert b"\r\n" not in path.read_bytes()
    loaded = read_dataset_csv(path)
    assert loaded.role == "train"
    assert np.array_equal(loaded.features, train.features)
    assert np.array_equal(loaded.labels, train.labels)


def test_splits_roundtrip_and_role_inference(tmp_path, spec):
    paths = write_splits(generate_dataset(spec), tmp_path)
    assert paths["validation"].name == "val.csv"
    assert read_dataset_csv(paths["validation"]).role == "validation"
    assert read_dataset_csv(paths["test"]).role == "test"
    assert len(read_splits(tmp_path)["test"]) == 40


def test_bad_header_is_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,label\n1,2,0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_dataset_csv(path)


def test_labels_outside_class_range_are_rejected(tmp_path):
    path = tmp_path / "neg.csv"
    path.write_text("f0,f1,label\n0.5,1.5,0\n1,2,-1\n", encoding="utf-8")
    with pytest.raises(ShapeMismatchError, match="-1"):
        read_dataset_csv(path)

    path = tmp_path / "big.csv"
    path.write_text("f0,f1,label\n0.5,1.5,0\n1,2,3\n", encoding="utf-8")
    assert list(read_dataset_csv(path).labels) == [0, 3]
    with pytest.raises(ShapeMismatchError):
        read_dataset_csv(path, num_classes=3)
    assert len(read_dataset_csv(path, num_classes=4)) == 2


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(3), role="holdout")
    data = Dataset(np.arange(6.0).reshape(3, 2), np.array([0, 1, 0]))
    assert len(data.concat(data.slice([2]))) == 4


def test_iter_epoch_covers_every_index():
    batches = list(iter_epoch(10, 4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_batch_sampler_is_seeded_and_drops_tail():
    a = BatchSampler(10, 4, master_seed=1, stream="soup/data")
    b = BatchSampler(10, 4, master_seed=1, stream="soup/data")
    first = [a.next_indices() for _ in range(4)]
    assert all(len(batch) == 4 for batch in first)
    assert a.epoch == 1
    for batch in first:
        assert np.array_equal(batch, b.next_indices())
    assert len(set(np.concatenate(first[:2]).tolist())) == 8
    assert len(BatchSampler(3, 64, 0, "x").next_indices()) == 3
