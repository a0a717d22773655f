# -*- coding: utf-8 -*-
import numpy as np
import pandas as pd
import pytest

from data.dataset import DataSpec, generate_dataset
from finetune.ingredient_factory import FinetuneSettings, build_ingredients
from finetune.trainer import HyperParams, SearchGrid, finetune_one, pretrain, random_search
from models.mlp import ModelSpec, evaluate, init_params
from params.checkpoint import read_checkpoint
from params.errors import TrainingDivergedError
from params.seeding import derive_seed, make_rng


@pytest.fixture(scope="module")
def train():
    return generate_dataset(DataSpec(n_train=90, n_val=30, n_test=30, seed=1))["train"]


def test_random_search_is_prefix_stable():
    grid = SearchGrid()
    five = random_search(5, master_seed=7, grid=grid)
    assert random_search(3, master_seed=7, grid=grid) == five[:3]
    for i, hp in enumerate(five, start=1):
        assert hp.learning_rate in grid.learning_rates
        assert hp.epochs in grid.epochs
        assert hp.seed == derive_seed(7, f"finetune/{i}")
    with pytest.raises(ValueError):
        random_search(0, master_seed=7)


def test_random_search_draws_each_learning_rate_uniformly():
    grid = SearchGrid()
    rates = pd.Series([hp.learning_rate for hp in random_search(1000, master_seed=3, grid=grid)])
    frequencies = rates.value_counts(normalize=True)
    assert sorted(frequencies.index) == sorted(grid.learning_rates)
    for lr in grid.learning_rates:
        assert frequencies[lr] == pytest.approx(0.25, abs=0.05)


def test_zero_learning_rate_returns_theta_0(train):
    spec = ModelSpec()
    theta_0 = init_params(spec, make_rng(0, "init"))
    hp = HyperParams(learning_rate=0.0, weight_decay=0.01, epochs=2, seed=5)
    assert np.array_equal(finetune_one(spec, theta_0, train, hp), theta_0)


def test_pretrain_without_epochs_is_the_init(train):
    spec = ModelSpec()
    hp = HyperParams(learning_rate=0.1, epochs=0, seed=11)
    assert np.array_equal(pretrain(spec, train, hp), init_params(spec, make_rng(11, "init")))


def test_training_reduces_loss(train):
    spec = ModelSpec()
    hp = HyperParams(learning_rate=0.05, epochs=5, seed=2)
    theta_0 = init_params(spec, make_rng(0, "init"))
    theta = finetune_one(spec, theta_0, train, hp)
    assert evaluate(spec, theta, train).value < evaluate(spec, theta_0, train).value


def test_distinct_seeds_give_distinct_checkpoints(train):
    spec = ModelSpec()
    theta_0 = init_params(spec, make_rng(0, "init"))
    first = finetune_one(spec, theta_0, train, HyperParams(learning_rate=0.05, epochs=2, seed=1))
    second = finetune_one(spec, theta_0, train, HyperParams(learning_rate=0.05, epochs=2, seed=2))
    assert np.linalg.norm(first - second) > 0


def test_weight_decay_shrinks_the_final_norm(train):
    spec = ModelSpec()
    theta_0 = init_params(spec, make_rng(0, "init"))

    def _mean_norm(wd):
        return np.mean([
            np.linalg.norm(finetune_one(spec, theta_0, train, HyperParams(learning_rate=0.05, weight_decay=wd,
                                                                          epochs=10, seed=seed)))
            for seed in (1, 2, 3)
        ])

    norms = [_mean_norm(wd) for wd in (0.0, 0.01, 0.1)]
    assert norms[0] > norms[1] > norms[2]


def test_divergence_is_reported(train):
    spec = ModelSpec()
    hp = HyperParams(learning_rate=1e300, epochs=2, seed=2)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        finetune_one(spec, init_params(spec, make_rng(0, "init")), train, hp)


def test_build_ingredients_layout_and_determinism(tmp_path, train):
    spec = ModelSpec()
    settings = FinetuneSettings(k=3, master_seed=4, pretrain_epochs=1, grid=SearchGrid(epochs=[1]))
    serial = build_ingredients(train, spec, settings, tmp_path / "serial", jobs=1)
    parallel = build_ingredients(train, spec, settings, tmp_path / "parallel", jobs=3)

    assert sorted(p.name for p in serial.root.glob("*.ckpt")) == [
        "ingredient_01.ckpt", "ingredient_02.ckpt", "ingredient_03.ckpt", "theta_0.ckpt",
    ]
    assert serial.manifest.read_text(encoding="utf-8").splitlines() == [
        "ingredient_01.ckpt", "ingredient_02.ckpt", "ingredient_03.ckpt",
    ]
    hparams = pd.read_csv(serial.root / "hparams.csv")
    assert list(hparams["model_id"]) == [1, 2, 3]
    for a, b in zip(serial.ingredients, parallel.ingredients):
        assert a.read_bytes() == b.read_bytes()
    layer_map, _ = read_checkpoint(serial.theta_0)
    assert layer_map == spec.layer_map()
