"""Hypothesis strategies shared by the test modules."""

import numpy as np
from hypothesis import strategies as st

from stlayout.layout import LayoutVideo


def relabel(raw: np.ndarray) -> np.ndarray:
    """Make ids contiguous from 0 and force at least one foreground pixel."""
    raw = np.asarray(raw, dtype=np.int64).copy()
    if not raw.any():
        raw.flat[0] = 1
    ids = np.unique(raw)
    fg = ids[ids > 0]
    out = np.zeros_like(raw)
    for new, old in enumerate(fg, start=1):
        out[raw == old] = new
    return out


@st.composite
def layouts(draw, max_frames=3, max_side=6, max_attrs=3):
    n = draw(st.integers(1, max_frames))
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    attrs = draw(st.integers(1, max_attrs))
    flat = draw(st.lists(st.integers(0, attrs), min_size=n * h * w, max_size=n * h * w))
    return LayoutVideo(relabel(np.array(flat).reshape(n, h, w)))


def random_layout(rng, n, h, w, attrs) -> LayoutVideo:
    return LayoutVideo(relabel(rng.integers(0, attrs + 1, size=(n, h, w))))
