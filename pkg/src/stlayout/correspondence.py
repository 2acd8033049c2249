"""Cross-frame similarity, positive/negative headroom values and best matches."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .numerics import ZeroNormWarning, as_matrix, check_finite, matmul, rowwise_extreme


@dataclass(frozen=True)
class SimilarityMatrix:
    """Raw query-key dot products (no 1/sqrt(d) scaling), queries x keys."""

    values: np.ndarray

    @property
    def queries(self) -> int:
        return self.values.shape[0]

    @property
    def keys(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PosNegValues:
    """Per-entry distance to the row maximum (``m_pos``) and row minimum (``m_neg``)."""

    m_pos: np.ndarray
    m_neg: np.ndarray


@dataclass(frozen=True)
class MatchResult:
    best: np.ndarray
    worst: np.ndarray
    similarity: np.ndarray


def similarity(q_features, k_features) -> SimilarityMatrix:
    q = as_matrix(q_features, "query features")
    k = as_matrix(k_features, "key features")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"feature dimensions differ: queries {q.shape}, keys {k.shape}")
    return SimilarityMatrix(matmul(q, k.T))


def pos_neg_values(sim) -> PosNegValues:
    """Headroom of each logit towards its row's max and min.

    Rows span the full spatio-temporal key axis, so the extremes are taken
    over every frame's keys. Each row of both outputs holds an exact zero.
    """
    values = sim.values if isinstance(sim, SimilarityMatrix) else as_matrix(sim, "similarity")
    if values.shape[1] < 1:
        raise ShapeError("similarity matrix has no keys")
    row_max = rowwise_extreme(values, "max")[:, None]
    row_min = rowwise_extreme(values, "min")[:, None]
    return PosNegValues(m_pos=row_max - values, m_neg=values - row_min)


def cosine_matrix(queries, keys) -> np.ndarray:
    """Cosine similarity of every query row against every key row.

    Zero-norm rows produce 0 similarity (with a warning) instead of NaN.
    """
    q = as_matrix(queries, "queries")
    k = as_matrix(keys, "keys")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"feature dimensions differ: {q.shape} vs {k.shape}")
    qn = np.linalg.norm(q, axis=1)
    kn = np.linalg.norm(k, axis=1)
    if (qn == 0).any() or (kn == 0).any():
        warnings.warn("cosine similarity of a zero-norm vector", ZeroNormWarning, stacklevel=2)
    qs = np.where(qn > 0, qn, 1.0)
    ks = np.where(kn > 0, kn, 1.0)
    out = (q / qs[:, None]) @ (k / ks[:, None]).T
    return check_finite(np.clip(out, -1.0, 1.0))


def best_match(query_feature, key_features) -> MatchResult:
    """Most and least similar key (cosine) for one query vector.

    Ties go to the lowest key index.
    """
    q = np.asarray(query_feature, dtype=np.float64).reshape(1, -1)
    if np.linalg.norm(q) == 0.0:
        raise ValidationError("query feature has zero norm")
    sims = cosine_matrix(q, key_features)[0]
    return MatchResult(
        best=np.asarray(int(np.argmax(sims))),
        worst=np.asarray(int(np.argmin(sims))),
        similarity=sims,
    )


def best_matches(query_features, key_features) -> MatchResult:
    """Row-wise :func:`best_match` for a batch of queries."""
    q = as_matrix(query_features, "queries")
    if (np.linalg.norm(q, axis=1) == 0).any():
        raise ValidationError("a query feature has zero norm")
    sims = cosine_matrix(q, key_features)
    return MatchResult(best=sims.argmax(axis=1), worst=sims.argmin(axis=1), similarity=sims)
