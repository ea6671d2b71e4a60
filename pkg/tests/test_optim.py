import math

import numpy as np
import pytest

from dwvit.config import TrainConfig
from dwvit.model import build_model
from dwvit.optim import AdamW, Moments, adamw_step, decay_mask, lr_at
from dwvit.presets import model_preset
from dwvit.tensor import Tensor


@pytest.fixture
def config() -> TrainConfig:
    return TrainConfig(base_lr=1e-3, epochs=30, warmup_epochs=5)


class TestSchedule:
    def test_warmup_starts_low(self, config):
        assert lr_at(0.0, config) == pytest.approx(1e-3 * 1e-3)

    def test_end_of_warmup_is_base(self, config):
        assert lr_at(5.0, config) == pytest.approx(1e-3)

    def test_cosine_midpoint(self, config):
        assert lr_at(17.5, config) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_final_epoch_is_min(self, config):
        assert lr_at(30.0, config) == pytest.approx(config.min_lr)
        assert lr_at(45.0, config) == pytest.approx(config.min_lr)

    def test_continuous_at_warmup_boundary(self, config):
        assert lr_at(5.0 - 1e-9, config) == pytest.approx(lr_at(5.0, config), rel=1e-6)

    def test_monotone_after_warmup(self, config):
        rates = [lr_at(5.0 + i * 0.25, config) for i in range(101)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_warmup_is_linear(self, config):
        a, b, c = (lr_at(e, config) for e in (1.0, 2.0, 3.0))
        assert b - a == pytest.approx(c - b)

    def test_default_min_lr(self):
        assert TrainConfig(base_lr=5e-4).min_lr == pytest.approx(5e-6)


def adam_reference(param, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain Adam, same arithmetic order."""
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    param = param.copy()
    for t, g in enumerate(grads, start=1):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        config = TrainConfig(weight_decay=0.0)
        p = Tensor(np.zeros(3))
        adamw_step([p], [np.ones(3)], [], 1, 1e-3, config)
        np.testing.assert_allclose(p.data, -1e-3, atol=1e-6)

    def test_zero_gradient_is_a_fixed_point(self):
        config = TrainConfig(weight_decay=0.0)
        p = Tensor(np.array([1.0, -2.0, 3.0]))
        state = []
        for t in range(1, 6):
            adamw_step([p], [np.zeros(3)], state, t, 1e-2, config)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_decay_alone_is_multiplicative(self):
        config = TrainConfig(weight_decay=0.05)
        p = Tensor(np.array([1.0, -2.0]))
        state = []
        for t in range(1, 4):
            adamw_step([p], [np.zeros(2)], state, t, 0.1, config)
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.05) ** 3)

    def test_without_decay_equals_adam(self, rng):
        config = TrainConfig(weight_decay=0.0)
        start = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(10)]
        p = Tensor(start.copy())
        state = []
        for t, g in enumerate(grads, start=1):
            adamw_step([p], [g], state, t, 3e-3, config)
        np.testing.assert_array_equal(p.data, adam_reference(start, grads, 3e-3))

    def test_state_is_per_parameter(self):
        config = TrainConfig()
        params = [Tensor(np.zeros(2)), Tensor(np.zeros((2, 2)))]
        state = []
        adamw_step(params, [np.ones(2), np.ones((2, 2))], state, 1, 1e-3, config)
        assert [s.m.shape for s in state] == [(2,), (2, 2)]
        assert isinstance(state[0], Moments)

    def test_missing_gradient_is_skipped(self):
        p = Tensor(np.ones(2))
        adamw_step([p], [None], [], 1, 1e-3, TrainConfig())
        np.testing.assert_array_equal(p.data, [1.0, 1.0])


def test_decay_mask_skips_norms_biases_and_embeddings():
    model = build_model(model_preset("gradcheck"))
    mask = dict(zip((n for n, _ in model.named_parameters()), decay_mask(model.named_parameters())))
    assert mask["head.weight"]
    assert mask["groups.0.blocks.0.mhsa.attn.q.weight"]
    assert mask["groups.0.branches.0.weight"]
    assert not mask["head.bias"]
    assert not mask["norm.gamma"]
    assert not mask["patch_embed.pos_embed"]
    assert not mask["patch_embed.cls_token"]
    assert not mask["groups.0.branches.0.bn.gamma"]


def test_optimizer_steps_and_clears(rng):
    model = build_model(model_preset("gradcheck"))
    optimizer = AdamW(model.named_parameters(), TrainConfig())
    before = model.head.weight.data.copy()
    for p in optimizer.params:
        p.grad = np.ones_like(p.data)
    optimizer.step(1e-3)
    assert optimizer.t == 1
    assert not np.array_equal(model.head.weight.data, before)
    optimizer.zero_grad()
    assert all(p.grad is None for p in optimizer.params)
    assert math.isclose(np.abs(model.head.weight.data - before).max(), 1e-3, rel_tol=0.1)
