import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvbudget.tensor import (
    DegenerateRowError,
    ShapeError,
    UndefinedSimilarityError,
    cosine_similarity,
    matmul,
    softmax_rows,
    top_k_indices,
)


def triple_loop(a, b):
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(2, 2))
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_product(self):
        assert matmul([[1, 2], [3, 4]], [[0], [1]]).tolist() == [[2.0], [4.0]]

    def test_against_triple_loop(self, rng):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        expected = np.array(triple_loop(a.tolist(), b.tolist()))
        assert np.max(np.abs(matmul(a, b) - expected)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = rng.normal(size=(4, 5)), rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


class TestSoftmax:
    def test_symmetric_row(self):
        assert np.allclose(softmax_rows([[0.0, 0.0, 0.0]]), 1 / 3, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] < 1e-300

    def test_closed_form(self):
        out = softmax_rows([[np.log(2.0), 0.0]])
        assert out[0] == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_masked_entries_are_exact_zero(self):
        out = softmax_rows([[0.3, -np.inf, 1.0]])
        assert out[0, 1] == 0.0

    def test_all_masked_row_is_degenerate(self):
        with pytest.raises(DegenerateRowError):
            softmax_rows([[-np.inf, -np.inf]])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
                  elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, m):
        out = softmax_rows(m)
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9, rtol=0)


class TestCosine:
    def test_identical(self, rng):
        u = rng.normal(size=9)
        assert cosine_similarity(u, u) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_opposite(self, rng):
        u = rng.normal(size=5)
        assert cosine_similarity(u, -u) == pytest.approx(-1.0, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(UndefinedSimilarityError):
            cosine_similarity([0, 0], [1, 0])

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, 6, elements=st.floats(-10, 10)),
        arrays(np.float64, 6, elements=st.floats(-10, 10)),
        st.floats(1e-3, 1e3),
    )
    def test_positive_scale_invariance(self, u, v, alpha):
        if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        assert abs(cosine_similarity(alpha * u, v) - cosine_similarity(u, v)) < 1e-12


class TestTopK:
    def test_basic(self):
        assert top_k_indices([0.1, 0.9, 0.5], 2).tolist() == [1, 2]

    def test_tie_prefers_lower_index(self):
        assert top_k_indices([0.5, 0.5, 0.1], 1).tolist() == [0]

    def test_k_exceeds_n(self):
        assert top_k_indices([3.0, 1.0, 2.0], 10).tolist() == [0, 1, 2]

    def test_negative_k(self):
        with pytest.raises(ValueError):
            top_k_indices([1.0], -1)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30))
    def test_full_k_is_permutation(self, scores):
        assert top_k_indices(scores, len(scores)).tolist() == list(range(len(scores)))
