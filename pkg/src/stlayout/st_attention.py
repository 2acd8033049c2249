"""Layout-guided attention modulation across all frames of a video.

For a query frame ``i`` the keys and values come from every frame. The raw
logits ``S = Q K^T`` are shifted by

    M = lam * R * M_pos * (1 - S_st) - lam * (1 - R) * M_neg * (1 - S_st)

where ``R`` is a binary condition map (1 = same attribute, boost; 0 = other
attribute, suppress), ``M_pos``/``M_neg`` are the distances of each logit to
its row max/min and ``S_st`` is the area share of the attribute involved.
The shifted logits are divided by sqrt(d) and passed through a softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .correspondence import SimilarityMatrix
from .errors import BoundsError, ShapeError, ValidationError
from .layout import AttributeAreas, LayoutVideo, TokenAttributeMap
from .numerics import as_matrix, check_finite, stable_softmax

SIZE_MODES = ("key", "pair_min")


@dataclass(frozen=True)
class ConditionMap:
    """Binary queries x keys map for one query frame."""

    kind: str  # "self" or "cross"
    frame: int
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SizeRegularizer:
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LambdaSchedule:
    """Modulation strength per denoising step.

    ``lam(t) = base_strength * (1 - t / active_steps)`` for ``t < active_steps``
    and 0 afterwards; step 0 is the first (noisiest) denoising step.
    """

    total_steps: int = 50
    active_steps: int = 15
    base_strength: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if not 0 <= self.active_steps <= self.total_steps:
            raise ValidationError(
                f"active_steps must be in 0..{self.total_steps}, got {self.active_steps}"
            )
        if not (self.base_strength >= 0 and math.isfinite(self.base_strength)):
            raise ValidationError(f"base_strength must be finite and >= 0, got {self.base_strength}")

    def __call__(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise BoundsError(f"step {step} outside 0..{self.total_steps - 1}")
        if step >= self.active_steps:
            return 0.0
        return self.base_strength * (1.0 - step / self.active_steps)

    def values(self) -> np.ndarray:
        return np.array([self(t) for t in range(self.total_steps)])


@dataclass(frozen=True)
class AttentionOutput:
    attended: np.ndarray
    attention_map: np.ndarray


def build_self_condition_map(layout: LayoutVideo, frame: int) -> ConditionMap:
    """1 where query (frame ``frame``) and key (any frame) share an attribute.

    Background (id 0) is treated as an attribute of its own.
    """
    query_labels = layout.frame_labels(frame)
    key_labels = layout.flat_labels()
    values = (query_labels[:, None] == key_labels[None, :]).astype(np.float64)
    return ConditionMap("self", frame, values)


def build_cross_condition_map(
    layout: LayoutVideo, frame: int, tokens: TokenAttributeMap
) -> ConditionMap:
    """Column ``b`` is the frame's mask of attribute ``k[b]``, or zeros if ``k[b] == 0``."""
    tokens.validate(layout)
    query_labels = layout.frame_labels(frame)
    k = tokens.as_array()
    values = (query_labels[:, None] == k[None, :]) & (k[None, :] != 0)
    return ConditionMap("cross", frame, values.astype(np.float64))


def build_size_regularizer(
    cmap: ConditionMap,
    areas: AttributeAreas,
    layout: LayoutVideo,
    tokens: Optional[TokenAttributeMap] = None,
    mode: str = "key",
) -> SizeRegularizer:
    """Area share of the key-side attribute, broadcast to the map's shape.

    ``mode="pair_min"`` uses the smaller of the query and key attribute
    shares instead. Unassociated text tokens always carry 0.
    """
    if mode not in SIZE_MODES:
        raise ValidationError(f"size mode must be one of {SIZE_MODES}, got {mode!r}")
    props = np.asarray(areas.proportions, dtype=np.float64)
    if props.shape[0] != layout.num_attributes + 1:
        raise ShapeError(
            f"areas cover {props.shape[0]} ids, layout has {layout.num_attributes + 1}"
        )
    query_labels = layout.frame_labels(cmap.frame)
    if cmap.kind == "self":
        key_share = props[layout.flat_labels()]
        associated = np.ones_like(key_share, dtype=bool)
    elif cmap.kind == "cross":
        if tokens is None:
            raise ValidationError("cross-attention size regularizer needs the token map")
        k = tokens.as_array()
        associated = k != 0
        key_share = np.where(associated, props[k], 0.0)
    else:
        raise ValidationError(f"unknown condition map kind {cmap.kind!r}")
    expected = (query_labels.size, key_share.size)
    if cmap.shape != expected:
        raise ShapeError(f"condition map shape {cmap.shape} does not match layout-derived {expected}")
    if mode == "key":
        values = np.broadcast_to(key_share, expected).copy()
    else:
        values = np.minimum(props[query_labels][:, None], key_share[None, :])
        values = np.where(associated[None, :], values, 0.0)
    return SizeRegularizer(values)


def _values(x, what):
    if isinstance(x, (ConditionMap, SizeRegularizer, SimilarityMatrix)):
        return x.values
    return as_matrix(x, what)


def _modulation(s: np.ndarray, r: np.ndarray, reg: np.ndarray, lambda_t: float) -> np.ndarray:
    # r is binary, so r*m_pos - (1-r)*m_neg reduces to a select
    row_max = s.max(axis=1, keepdims=True)
    row_min = s.min(axis=1, keepdims=True)
    headroom = np.where(r != 0.0, row_max - s, row_min - s)
    return headroom * (lambda_t * (1.0 - reg))


def modulation_term(sim, cmap, size, lambda_t: float) -> np.ndarray:
    """Additive logit shift: boost R=1 pairs toward the row max, push R=0 pairs toward the row min."""
    if lambda_t < 0 or not math.isfinite(lambda_t):
        raise ValidationError(f"lambda_t must be finite and >= 0, got {lambda_t}")
    s = _values(sim, "similarity")
    r = _binary(_values(cmap, "condition map"))
    reg = _values(size, "size regularizer")
    if not (s.shape == r.shape == reg.shape):
        raise ShapeError(f"shape mismatch: sim {s.shape}, map {r.shape}, size {reg.shape}")
    if s.shape[1] < 1:
        raise ShapeError("similarity matrix has no keys")
    return _modulation(s, r, reg, lambda_t)


def _binary(r: np.ndarray) -> np.ndarray:
    if not ((r == 0.0) | (r == 1.0)).all():
        raise ValidationError("condition map entries must be 0 or 1")
    return r


def _attend(q, k, v, r, reg, lambda_t, d):
    logits = q @ k.T
    if lambda_t != 0.0:
        logits = logits + _modulation(logits, r, reg, lambda_t)
    attn = stable_softmax(logits / math.sqrt(d))
    attended = attn @ v
    check_finite(attended, "attention output")
    return attended, attn


def _check_operands(q, k, v, r, reg, d):
    q = as_matrix(q, "queries")
    k = as_matrix(k, "keys")
    v = as_matrix(v, "values")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    want = (q.shape[0], k.shape[0])
    if r.shape != want or reg.shape != want:
        raise ShapeError(f"condition map {r.shape} / size {reg.shape} must be {want}")
    _binary(r)
    d = q.shape[1] if d is None else d
    if d <= 0:
        raise ValidationError(f"head dimension must be positive, got {d}")
    return q, k, v, d


def vanilla_attention(q, k, v, d: Optional[int] = None) -> AttentionOutput:
    """softmax(Q K^T / sqrt(d)) V."""
    q = as_matrix(q, "queries")
    k = as_matrix(k, "keys")
    v = as_matrix(v, "values")
    d = q.shape[1] if d is None else d
    attended, attn = _attend(q, k, v, None, None, 0.0, d)
    return AttentionOutput(attended, attn)


def modulated_attention(q, k, v, cmap, size, lambda_t: float, d: Optional[int] = None) -> AttentionOutput:
    """Attention with the layout modulation added to the raw logits before the sqrt(d) scaling.

    With ``lambda_t == 0`` this is exactly :func:`vanilla_attention`.
    """
    if lambda_t < 0 or not math.isfinite(lambda_t):
        raise ValidationError(f"lambda_t must be finite and >= 0, got {lambda_t}")
    r = _values(cmap, "condition map")
    reg = _values(size, "size regularizer")
    q, k, v, d = _check_operands(q, k, v, r, reg, d)
    attended, attn = _attend(q, k, v, r, reg, lambda_t, d)
    return AttentionOutput(attended, attn)


def sliced_modulated_attention(
    q, k, v, cmap, size, lambda_t: float, d: Optional[int] = None, chunk_size: int = 1024
) -> AttentionOutput:
    """:func:`modulated_attention` evaluated over blocks of at most ``chunk_size`` query rows.

    Only a ``chunk_size x keys`` block of logits is live at a time (plus the
    returned attention map).
    """
    if chunk_size < 1:
        raise ValidationError(f"chunk_size must be >= 1, got {chunk_size}")
    if lambda_t < 0 or not math.isfinite(lambda_t):
        raise ValidationError(f"lambda_t must be finite and >= 0, got {lambda_t}")
    r = _values(cmap, "condition map")
    reg = _values(size, "size regularizer")
    q, k, v, d = _check_operands(q, k, v, r, reg, d)
    n = q.shape[0]
    attended = np.empty((n, v.shape[1]))
    attn = np.empty((n, k.shape[0]))
    for start in range(0, n, chunk_size):
        rows = slice(start, min(start + chunk_size, n))
        attended[rows], attn[rows] = _attend(q[rows], k, v, r[rows], reg[rows], lambda_t, d)
    return AttentionOutput(attended, attn)
