"""Dense float64 matrix helpers.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
function here checks that its inputs and outputs are finite.
"""

from __future__ import annotations

import enum
import warnings

import numpy as np

from .errors import NumericalError, ShapeError


class Axis(enum.Enum):
    ROWS = 0
    COLS = 1


class ZeroNormWarning(RuntimeWarning):
    """Cosine similarity was requested for a zero-norm vector."""


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericalError(f"{what} contains non-finite values")
    return x


def as_matrix(data, what: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {m.shape}")
    return check_finite(m, what)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "product")


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    x = as_matrix(logits, "logits")
    if x.shape[1] == 0:
        raise ShapeError("softmax needs at least one column")
    return stable_softmax(x)


def stable_softmax(x: np.ndarray) -> np.ndarray:
    """Unchecked row softmax for callers that validate their own operands."""
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def rowwise_extreme(m, which: str, axis: Axis = Axis.ROWS) -> np.ndarray:
    """Per-row (or per-column) max or min as a 1-D array.

    With ``axis=Axis.ROWS`` element ``i`` is the extreme of row ``i``.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError(f"extreme of empty matrix {m.shape}")
    reduce_over = 1 if axis is Axis.ROWS else 0
    if which == "max":
        return m.max(axis=reduce_over)
    if which == "min":
        return m.min(axis=reduce_over)
    raise ValueError(f"which must be 'max' or 'min', got {which!r}")


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    A zero-norm input yields 0.0 and emits :class:`ZeroNormWarning`.
    """
    a = check_finite(np.asarray(a, dtype=np.float64).ravel(), "vector")
    b = check_finite(np.asarray(b, dtype=np.float64).ravel(), "vector")
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity of a zero-norm vector", ZeroNormWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
