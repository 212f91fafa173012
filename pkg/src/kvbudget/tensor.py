"""Dense numeric primitives shared by the model, the policies and the metrics.

Everything works on float64 numpy arrays. Functions never mutate their inputs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry to normalise against."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Softmax along the last axis with max subtraction.

    Entries equal to ``-inf`` act as a mask and come out as exactly 0.
    A row whose entries are all ``-inf`` raises :class:`DegenerateRowError`.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 0 or m.shape[-1] == 0:
        raise ShapeError("softmax needs at least one column")
    peak = m.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise DegenerateRowError("softmax row has no finite maximum")
    e = np.exp(m - peak)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    uu = float(u @ u)
    vv = float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    # sqrt of the product keeps cos(u, u) == 1.0 exactly
    cos = float(u @ v) / np.sqrt(uu * vv)
    return float(min(1.0, max(-1.0, cos)))


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending.

    Ties go to the lower index, so earlier tokens win.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def rank_desc(primary, secondary=None) -> np.ndarray:
    """Permutation sorting by ``primary`` then ``secondary`` (both descending), then index."""
    primary = np.asarray(primary, dtype=np.float64).ravel()
    idx = np.arange(primary.size)
    if secondary is None:
        return np.lexsort((idx, -primary))
    secondary = np.asarray(secondary, dtype=np.float64).ravel()
    return np.lexsort((idx, -secondary, -primary))
