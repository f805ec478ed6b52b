"""Tests for the seeded validation suites."""

from __future__ import annotations

import numpy as np
import pytest

import src.validation as validation
from src.oracles.reference import RELATIVE_ERROR_FLOOR, relative_error
from src.validation import BASE_SEED, SUITES, random_topology, run_suite, run_validation


@pytest.mark.parametrize("name", sorted(SUITES))
def test_each_suite_passes_on_a_few_cases(name):
    result = run_suite(name, cases=3)
    assert result.passed, result.message
    assert result.cases == 3
    assert result.failing_seed is None


def test_full_validation_passes():
    results = run_validation()
    assert [r.name for r in results] == list(SUITES)
    failed = [(r.name, r.failing_seed, r.message) for r in results if not r.passed]
    assert failed == []


def test_kernel_suites_cover_enough_cases():
    kernel_cases = sum(SUITES[name][1] for name in ("sdd_oracle", "dsd_oracle", "dds_oracle"))
    assert kernel_cases >= 500
    assert SUITES["transpose_index"][1] >= 200
    assert SUITES["dmoe_oracle"][1] >= 100
    assert SUITES["gradients"][1] >= 20


def test_injected_fault_fails_sdd_suite_with_seed():
    result = run_suite("sdd_oracle", fault="sdd_oracle", cases=20)
    assert not result.passed
    assert result.name == "sdd_oracle"
    assert result.failing_seed is not None
    assert result.failing_seed >= BASE_SEED


def test_fault_for_other_suite_leaves_sdd_alone():
    assert run_suite("sdd_oracle", fault="dsd_oracle", cases=5).passed


def test_filter_selects_by_substring():
    results = run_validation(filter="gradients", cases=1)
    assert [r.name for r in results] == ["gradients", "aux_loss_gradients"]


def test_unknown_filter_raises():
    with pytest.raises(KeyError, match="no validation suite"):
        run_validation(filter="nothing-matches")


def test_results_are_deterministic():
    a = run_suite("dsd_oracle", cases=10)
    b = run_suite("dsd_oracle", cases=10)
    assert a == b


def test_random_topology_respects_density_extremes():
    rng = np.random.default_rng(0)
    assert random_topology(rng, 3, 4, 2, density=0.0).nnz_blocks == 0
    assert random_topology(rng, 3, 4, 2, density=1.0).nnz_blocks == 12


def test_gradient_suite_passes_with_default_error_floor(monkeypatch):
    floors = []

    def recording(a, b, floor=RELATIVE_ERROR_FLOOR):
        floors.append(floor)
        return relative_error(a, b, floor)

    monkeypatch.setattr(validation, "relative_error", recording)
    result = run_suite("gradients")
    assert result.passed, result.message
    assert result.cases == SUITES["gradients"][1]
    assert result.max_error <= 1e-5
    assert floors and set(floors) == {1e-8}
