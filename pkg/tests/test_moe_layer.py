"""Tests for the dMoE forward/backward pass and the token-dropping baseline."""

from __future__ import annotations

import numpy as np
import pytest

from src.dense.ops import ShapeError
from src.moe.config import ConfigError, MoEConfig, get_preset
from src.moe.layer import dmoe_backward, dmoe_forward, moe_dropping_forward
from src.moe.weights import MoEWeights, expected_shapes, init_weights
from src.oracles.reference import per_expert_moe_oracle
from src.validation import gradient_check_error


def _config(**overrides) -> MoEConfig:
    values = dict(
        hidden_size=8,
        ffn_hidden_size=8,
        num_experts=4,
        top_k=1,
        block_size=4,
        activation="gelu",
    )
    values.update(overrides)
    return MoEConfig(**values)


def _case(seed: int = 0, num_tokens: int = 32, **overrides):
    config = _config(**overrides)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((num_tokens, config.hidden_size))
    return x, init_weights(config, rng), config


class TestForward:
    def test_matches_per_expert_oracle(self):
        x, w, config = _case()
        y, _ = dmoe_forward(x, w, config)
        np.testing.assert_allclose(y, per_expert_moe_oracle(x, w, config), atol=1e-10)

    def test_top2_renormalized_matches_oracle(self):
        x, w, config = _case(seed=1, top_k=2, renormalize_gates=True, activation="relu")
        y, _ = dmoe_forward(x, w, config)
        np.testing.assert_allclose(y, per_expert_moe_oracle(x, w, config), atol=1e-10)

    def test_single_expert_identity_is_dense_mlp(self):
        x, w, config = _case(seed=2, num_experts=1, activation="identity")
        y, _ = dmoe_forward(x, w, config)
        np.testing.assert_allclose(y, (x @ w.w1) @ w.w2, atol=1e-10)

    def test_capacity_factor_is_ignored(self):
        x, w, config = _case(seed=3)
        y_dropless, _ = dmoe_forward(x, w, config)
        y_capped, cache = dmoe_forward(x, w, _config(capacity_factor=0.25))
        np.testing.assert_array_equal(y_capped, y_dropless)
        assert cache.plan.dropped.shape[0] == 0

    def test_padded_rows_are_block_multiples(self):
        x, w, config = _case(seed=4, num_tokens=13)
        _, cache = dmoe_forward(x, w, config)
        assert np.all(cache.plan.padded_counts % config.block_size == 0)
        assert cache.h_pre.shape == (cache.plan.total_padded_rows, config.inner_dim)

    def test_preset_shapes(self):
        config = get_preset("xs")
        shapes = expected_shapes(config)
        assert shapes["w1"] == (512, 64 * 2048)
        assert shapes["w2"] == (64 * 2048, 512)
        assert config.blocks_per_expert == 16

    def test_wrong_input_width_raises(self):
        x, w, config = _case()
        with pytest.raises(ShapeError, match="hidden_size is 8"):
            dmoe_forward(x[:, :5], w, config)

    def test_wrong_weight_shape_raises(self):
        x, w, config = _case()
        bad = MoEWeights(router_w=w.router_w, w1=w.w1[:, :4], w2=w.w2)
        with pytest.raises(ShapeError, match="w1"):
            dmoe_forward(x, bad, config)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        x, w, config = _case(seed=5)
        _, cache = dmoe_forward(x, w, config)
        dx, grads = dmoe_backward(np.zeros_like(x), cache, w)
        np.testing.assert_array_equal(dx, np.zeros_like(x))
        for g in grads.as_dict().values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    @pytest.mark.parametrize("top_k", [1, 2])
    @pytest.mark.parametrize("activation", ["identity", "gelu"])
    def test_matches_finite_differences(self, top_k, activation):
        rng = np.random.default_rng(10 + top_k)
        config = MoEConfig(
            hidden_size=4,
            ffn_hidden_size=4,
            num_experts=3,
            top_k=top_k,
            block_size=2,
            activation=activation,
        )
        x = rng.standard_normal((12, 4))
        assert gradient_check_error(x, init_weights(config, rng), config) <= 1e-5

    def test_single_expert_identity_matches_hand_derivation(self):
        x, w, config = _case(seed=6, num_experts=1, activation="identity", num_tokens=10)
        _, cache = dmoe_forward(x, w, config)
        dy = np.random.default_rng(7).standard_normal(x.shape)
        dx, grads = dmoe_backward(dy, cache, w)
        # One expert: gate is exactly 1 and the router logits get no gradient.
        np.testing.assert_allclose(dx, dy @ w.w2.T @ w.w1.T, atol=1e-10)
        np.testing.assert_allclose(grads.w2, (x @ w.w1).T @ dy, atol=1e-10)
        np.testing.assert_allclose(grads.w1, x.T @ (dy @ w.w2.T), atol=1e-10)
        np.testing.assert_allclose(grads.router_w, np.zeros_like(w.router_w), atol=1e-12)

    def test_dy_shape_mismatch_raises(self):
        x, w, config = _case()
        _, cache = dmoe_forward(x, w, config)
        with pytest.raises(ShapeError, match="forward output"):
            dmoe_backward(np.zeros((3, 8)), cache, w)


class TestDroppingForward:
    def test_needs_finite_capacity(self):
        x, w, config = _case()
        with pytest.raises(ConfigError, match="finite capacity_factor"):
            moe_dropping_forward(x, w, config)

    def test_large_capacity_equals_dropless_bitwise(self):
        x, w, config = _case(seed=8)
        y_dropless, _ = dmoe_forward(x, w, config)
        y, _, stats = moe_dropping_forward(x, w, _config(capacity_factor=4.0))
        np.testing.assert_array_equal(y, y_dropless)
        assert stats.overall == 0.0

    def test_all_to_one_expert_drops_three_quarters(self):
        config = _config(capacity_factor=1.0, hidden_size=2, ffn_hidden_size=4)
        rng = np.random.default_rng(9)
        w = init_weights(config, rng)
        w.router_w[:] = 0.0
        w.router_w[0, 0] = 10.0
        x = np.abs(rng.standard_normal((8, 2))) + 1.0
        y, _, stats = moe_dropping_forward(x, w, config)
        assert stats.overall == pytest.approx(0.75)
        assert stats.dropped == 6
        np.testing.assert_array_equal(y[2:], np.zeros((6, 2)))

    def test_matches_oracle_under_capacity(self):
        x, w, config = _case(seed=11, capacity_factor=0.75, top_k=2)
        y, _, _ = moe_dropping_forward(x, w, config)
        np.testing.assert_allclose(y, per_expert_moe_oracle(x, w, config), atol=1e-10)
