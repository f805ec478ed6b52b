"""Tests for the dense float64 substrate."""

from __future__ import annotations

import numpy as np
import pytest

from src.dense.ops import ShapeError, activation, as_dense, matmul, softmax_rows


def _naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity_leaves_matrix_unchanged(self):
        a = np.array([[1.5, -2.0], [0.25, 3.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_bitwise_equal_to_naive_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(matmul(a, b), _naive_matmul(a, b))

    def test_bitwise_equal_to_naive_loop_on_rectangular_shapes(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 17))
        b = rng.standard_normal((17, 4))
        np.testing.assert_array_equal(matmul(a, b), _naive_matmul(a, b))

    def test_transpose_flags_match_explicit_transpose(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(
            matmul(a, b, transpose_a=True, transpose_b=True),
            matmul(np.ascontiguousarray(a.T), np.ascontiguousarray(b.T)),
        )

    def test_chunking_does_not_change_result(self, monkeypatch):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((9, 6))
        b = rng.standard_normal((6, 7))
        expected = matmul(a, b)
        monkeypatch.setattr("src.dense.ops._CHUNK_ELEMENTS", 1)
        np.testing.assert_array_equal(matmul(a, b), expected)

    def test_empty_inner_dimension_gives_zeros(self):
        out = matmul(np.zeros((2, 0)), np.zeros((0, 3)))
        np.testing.assert_array_equal(out, np.zeros((2, 3)))

    def test_inner_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\) x \(4, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_rejects_non_2d_input(self):
        with pytest.raises(ShapeError, match="must be 2-D"):
            as_dense(np.zeros(3))

    @pytest.mark.parametrize("seed", range(10))
    def test_associative_against_numpy_on_8x8_triples(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
        left = matmul(matmul(a, b), c)
        np.testing.assert_allclose(left, (a @ b) @ c, rtol=0, atol=1e-10)
        np.testing.assert_allclose(left, a @ (b @ c), rtol=0, atol=1e-10)
        np.testing.assert_allclose(left, matmul(a, matmul(b, c)), rtol=0, atol=1e-10)


class TestSoftmaxRows:
    def test_equal_logits_split_evenly(self):
        np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_known_values(self):
        out = softmax_rows(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)

    def test_shift_invariance(self):
        row = np.array([[0.3, -1.2, 2.5]])
        np.testing.assert_allclose(softmax_rows(row + 40.0), softmax_rows(row), atol=1e-12)

    def test_rows_sum_to_one_for_large_logits(self):
        out = softmax_rows(np.array([[1000.0, 999.0], [-1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0])

    def test_empty_matrix_raises(self):
        with pytest.raises(ShapeError):
            softmax_rows(np.zeros((0, 3)))

    def test_random_rows_are_nonnegative_and_sum_to_one(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((50, 7)) * rng.uniform(0.1, 50.0, size=(50, 1))
        out = softmax_rows(logits)
        assert np.all(out >= 0.0)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12


class TestActivation:
    def test_definitional_values(self):
        assert activation("gelu", np.array([[0.0]]))[0, 0] == 0.0
        assert activation("relu", np.array([[-2.0]]))[0, 0] == 0.0
        np.testing.assert_array_equal(
            activation("identity", np.array([[-3.0, 4.0]]), "grad"), [[1.0, 1.0]]
        )

    def test_gelu_tanh_approximation_at_one(self):
        assert activation("gelu", np.array([[1.0]]))[0, 0] == pytest.approx(0.8412, abs=1e-4)

    @pytest.mark.parametrize("kind", ["gelu", "identity"])
    def test_grad_matches_central_differences(self, kind):
        x = np.array([[-1.0, 0.5, 2.0]])
        h = 1e-6
        numeric = (activation(kind, x + h) - activation(kind, x - h)) / (2 * h)
        analytic = activation(kind, x, "grad")
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6)

    def test_relu_grad_is_exact_away_from_zero(self):
        x = np.array([[-1.0, 0.5, 2.0]])
        np.testing.assert_array_equal(activation("relu", x, "grad"), [[0.0, 1.0, 1.0]])

    def test_identity_forward_returns_copy(self):
        x = np.array([[1.0, 2.0]])
        out = activation("identity", x)
        out[0, 0] = 99.0
        assert x[0, 0] == 1.0

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError, match="unknown activation kind"):
            activation("swish", np.zeros((1, 1)))
