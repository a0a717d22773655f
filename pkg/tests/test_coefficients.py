# -*- coding: utf-8 -*-
import numpy as np
import pytest

from models.gradcheck import central_difference
from params.errors import ShapeMismatchError
from params.vector import LayerMap
from soup.coefficients import (
    MixCoefficients,
    alpha_gradient,
    effective_coefficients,
    softmax_mixing_gradient,
    softmax_weights,
)


@pytest.fixture
def layer_map():
    return LayerMap.from_shapes([("w0", (3, 2)), ("b0", (2,)), ("w1", (2, 2)), ("b1", (2,))])


def test_effective_coefficients_sum_to_one():
    rng = np.random.default_rng(0)
    for k in (1, 2, 5, 16):
        alpha = rng.standard_normal((k, 4)) * 3.0
        eff = effective_coefficients(alpha)
        assert np.allclose(eff.sum(axis=0), 1.0, rtol=0, atol=1e-12)
        assert np.allclose(effective_coefficients(alpha + 7.5), eff, rtol=0, atol=1e-12)


def test_zero_alpha_is_uniform():
    alpha = MixCoefficients.full([1, 2, 3, 4], num_layers=4, layerwise=False)
    assert alpha.values.shape == (4, 1)
    assert np.all(effective_coefficients(alpha) == 0.25)


def test_effective_coefficients_errors():
    with pytest.raises(ShapeMismatchError):
        effective_coefficients(np.zeros((3, 1)), num_models=4)
    with pytest.raises(ValueError):
        effective_coefficients(np.array([[np.nan], [0.0]]))


def test_mix_coefficients_shapes():
    with pytest.raises(ShapeMismatchError):
        MixCoefficients(np.zeros((3, 2)), layerwise=False)
    with pytest.raises(ShapeMismatchError):
        MixCoefficients(np.zeros((3, 1)), ids=[1, 2])
    coef = MixCoefficients.full([5, 9], num_layers=4, layerwise=True, value=0.5)
    assert coef.ids == [5, 9]
    assert coef.num_columns == 4
    copy = coef.copy()
    copy.values[0, 0] = 1.0
    assert coef.values[0, 0] == 0.5


def test_alpha_gradient_is_a_dot_product(layer_map):
    rng = np.random.default_rng(1)
    grad = rng.standard_normal(layer_map.total_len)
    diffs = [(i, rng.standard_normal(layer_map.total_len)) for i in (1, 2, 3)]
    global_g = alpha_gradient(grad, diffs, layer_map, layerwise=False)
    layer_g = alpha_gradient(grad, diffs, layer_map, layerwise=True)
    assert global_g.shape == (3, 1)
    assert layer_g.shape == (3, 4)
    for r, (_, d) in enumerate(diffs):
        assert global_g[r, 0] == pytest.approx(float(grad @ d), rel=1e-12)
    assert np.allclose(layer_g.sum(axis=1), global_g[:, 0], rtol=1e-12, atol=1e-12)


def test_softmax_weights_columns():
    z = np.array([[1000.0, 0.0], [999.0, 0.0], [-5.0, 0.0]])
    w = softmax_weights(z)
    assert np.all(np.isfinite(w))
    assert np.allclose(w.sum(axis=0), 1.0)
    assert np.allclose(w[:, 1], 1.0 / 3.0)


def test_softmax_mixing_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((4, 3))
    grad_w = rng.standard_normal((4, 3))

    def _objective(flat: np.ndarray) -> float:
        return float(np.sum(grad_w * softmax_weights(flat.reshape(4, 3))))

    numeric = central_difference(_objective, z.ravel(), h=1e-6).reshape(4, 3)
    analytic = softmax_mixing_gradient(softmax_weights(z), grad_w)
    assert np.allclose(analytic, numeric, rtol=0, atol=1e-8)
    with pytest.raises(ShapeMismatchError):
        softmax_mixing_gradient(np.ones((4, 3)), np.ones((4, 2)))
