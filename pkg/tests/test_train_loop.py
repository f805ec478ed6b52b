"""Tests for the synthetic-task training loop."""

from __future__ import annotations

import numpy as np
import pytest

from src.moe.config import DROPLESS, ConfigError, MoEConfig
from src.moe.permutation import expert_capacity
from src.run_config import load_train_config
from src.training.loop import TrainingDiverged, TrainSettings, parse_mode, train_loop
from src.training.synth import SynthTaskConfig


def _small():
    model = MoEConfig(hidden_size=8, ffn_hidden_size=8, num_experts=4, block_size=4)
    task = SynthTaskConfig(tokens_per_batch=64, hidden_size=8, seed=1)
    return model, task


class TestParseMode:
    def test_dropless(self):
        assert parse_mode("dropless") is DROPLESS

    def test_capacity(self):
        assert parse_mode("capacity:1.5") == 1.5

    @pytest.mark.parametrize("mode", ["capacity:abc", "capacity:0", "fast"])
    def test_bad_modes_raise(self, mode):
        with pytest.raises(ConfigError):
            parse_mode(mode)


class TestTrainLoop:
    def test_zero_steps_gives_empty_history(self):
        model, task = _small()
        assert train_loop(model, task, steps=0) == []

    def test_dropless_never_drops(self):
        model, task = _small()
        history = train_loop(model, task, steps=5)
        assert [m.step for m in history] == [0, 1, 2, 3, 4]
        assert all(m.drop_fraction == 0.0 for m in history)
        assert all(sum(m.expert_counts) == task.tokens_per_batch for m in history)

    def test_runs_are_bitwise_reproducible(self):
        model, task = _small()
        a = train_loop(model, task, steps=4)
        b = train_loop(model, task, steps=4)
        assert [(m.loss, m.aux_loss) for m in a] == [(m.loss, m.aux_loss) for m in b]

    def test_worker_count_does_not_change_results(self):
        model, task = _small()
        a = train_loop(model, task, steps=3, workers=1)
        b = train_loop(model, task, steps=3, workers=8)
        assert [m.loss for m in a] == [m.loss for m in b]

    def test_capacity_mode_under_skew_drops_early(self):
        model, _, _ = load_train_config()
        task = SynthTaskConfig(num_clusters=4, tokens_per_batch=256, hidden_size=16, skew=2.0)
        history = train_loop(model, task, steps=10, capacity_factor=1.0)
        assert any(m.drop_fraction > 0.0 for m in history)

    def test_capacity_mode_load_never_exceeds_capacity(self):
        model, _, _ = load_train_config()
        task = SynthTaskConfig(num_clusters=4, tokens_per_batch=256, hidden_size=16, skew=2.0)
        capacity = expert_capacity(256, model.num_experts, 1.0)
        history = train_loop(model, task, steps=10, capacity_factor=1.0)
        assert all(m.max_expert_load <= capacity for m in history)
        assert all(
            sum(m.expert_counts) == round(256 * (1.0 - m.drop_fraction)) for m in history
        )

    def test_default_task_halves_the_loss(self):
        model, task, settings = load_train_config()
        history = train_loop(model, task, steps=300, settings=settings)
        assert history[-1].loss < 0.5 * history[0].loss
        assert all(m.drop_fraction == 0.0 for m in history)

    def test_gradient_clipping_runs(self):
        model, task = _small()
        history = train_loop(model, task, steps=2, settings=TrainSettings(max_grad_norm=0.1))
        assert len(history) == 2

    def test_hidden_size_mismatch_raises(self):
        model, _ = _small()
        with pytest.raises(ConfigError, match="does not match"):
            train_loop(model, SynthTaskConfig(hidden_size=5), steps=1)

    def test_non_finite_loss_raises_with_step(self, monkeypatch):
        model, task = _small()

        def nan_batch(cfg, step):
            x = np.full((cfg.tokens_per_batch, cfg.hidden_size), 1.0)
            return x, np.full_like(x, np.nan)

        monkeypatch.setattr("src.training.loop.synth_batch", nan_batch)
        with pytest.raises(TrainingDiverged, match="step 0"):
            train_loop(model, task, steps=3)
