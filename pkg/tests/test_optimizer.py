# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from soup.coefficients import MixCoefficients
from soup.optimizer import (
    SoupState,
    SoupTrainConfig,
    adamw_cosine_step,
    config_step,
    cosine_lr,
    disable_decentralization,
)


def _state(rows=3, cols=1, value=0.0):
    return SoupState.initial(MixCoefficients.full(list(range(1, rows + 1)), cols, cols > 1, value))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.01, 0, 100) == pytest.approx(0.01)
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005)
    assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0, abs=1e-18)


def test_first_step_moves_by_learning_rate():
    state = _state()
    adamw_cosine_step(state, np.array([[0.5]]), [0], total_steps=3, lr=0.1, weight_decay=0.1)
    # m̂/(√v̂+ε) = 0.5/(0.5+1e-8)，α 从 0 出发，权重衰减项为 0
    assert state.alpha.values[0, 0] == pytest.approx(-0.1 * 0.5 / (0.5 + 1e-8), rel=1e-12)
    assert state.step == 1
    assert state.row_steps.tolist() == [1, 0, 0]


def test_three_steps_match_hand_computation():
    lr, wd, b1, b2, eps = 0.1, 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -0.2, 0.1]
    state = _state()
    for g in grads:
        adamw_cosine_step(state, np.array([[g]]), [1], total_steps=3, lr=lr, weight_decay=wd)

    alpha, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        eta = 0.5 * lr * (1 + math.cos(math.pi * (t - 1) / 3))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        alpha = alpha - eta * (m_hat / (math.sqrt(v_hat) + eps) + wd * alpha)

    assert state.alpha.values[1, 0] == pytest.approx(alpha, rel=1e-12)
    assert state.adam_m[1, 0] == pytest.approx(m, rel=1e-12)
    assert state.adam_v[1, 0] == pytest.approx(v, rel=1e-12)
    assert state.alpha.values[0, 0] == 0.0 and state.alpha.values[2, 0] == 0.0


def test_inactive_rows_are_untouched():
    state = _state(rows=4, cols=3, value=0.7)
    before = state.alpha.values.copy()
    adamw_cosine_step(state, np.ones((2, 3)), [1, 3], total_steps=10, lr=0.01, weight_decay=0.5)
    assert np.array_equal(state.alpha.values[[0, 2]], before[[0, 2]])
    assert np.all(state.adam_m[[0, 2]] == 0) and np.all(state.adam_v[[0, 2]] == 0)
    assert not np.array_equal(state.alpha.values[[1, 3]], before[[1, 3]])


def test_bias_correction_is_per_row():
    state = _state(rows=2)
    for _ in range(3):
        adamw_cosine_step(state, np.array([[1.0]]), [0], total_steps=10, lr=0.01, weight_decay=0.0)
    adamw_cosine_step(state, np.array([[1.0]]), [1], total_steps=10, lr=0.01, weight_decay=0.0)
    assert state.row_steps.tolist() == [3, 1]
    # 第一次更新该行时，偏差校正后的步长与全局 step 无关: η_3·1/(1+ε)
    assert state.alpha.values[1, 0] == pytest.approx(-cosine_lr(0.01, 3, 10) / (1 + 1e-8), rel=1e-12)


def test_step_errors():
    state = _state()
    with pytest.raises(ValueError):
        adamw_cosine_step(state, np.ones((2, 1)), [0], total_steps=5, lr=0.1, weight_decay=0.0)
    state.step = 5
    with pytest.raises(ValueError):
        adamw_cosine_step(state, np.ones((1, 1)), [0], total_steps=5, lr=0.1, weight_decay=0.0)


def test_reset_rows():
    state = _state()
    adamw_cosine_step(state, np.ones((3, 1)), [0, 1, 2], total_steps=5, lr=0.1, weight_decay=0.0)
    alpha = state.alpha.values.copy()
    state.reset_rows([1])
    assert state.row_steps.tolist() == [1, 0, 1]
    assert state.adam_m[1, 0] == 0.0 and state.adam_m[0, 0] != 0.0
    assert np.array_equal(state.alpha.values, alpha)


def test_config_step_uses_config_values():
    cfg = SoupTrainConfig(lr=0.2, weight_decay=0.0)
    a, b = _state(), _state()
    config_step(a, np.array([[0.3]]), [2], cfg, total_steps=4)
    adamw_cosine_step(b, np.array([[0.3]]), [2], total_steps=4, lr=0.2, weight_decay=0.0)
    assert np.array_equal(a.alpha.values, b.alpha.values)


def test_soup_config_outer_iters():
    cfg = SoupTrainConfig(model_batch=4)
    assert cfg.resolve_outer_iters(16) == 4
    assert cfg.resolve_outer_iters(17) == 5
    assert cfg.resolve_outer_iters(16, block_size=16) == 1
    assert SoupTrainConfig(outer_iters=7).resolve_outer_iters(16) == 7
    assert disable_decentralization(cfg).decentralize is False
    assert cfg.decentralize is True
