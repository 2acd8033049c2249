"""Attribute layouts, token-to-attribute maps and PGM mask I/O.

A layout is a single integer raster per frame: pixel value = attribute id,
0 = background. Storing one id per pixel keeps the attribute masks disjoint.
Tokens are flattened frame-major, then row-major::

    index = frame * H * W + row * W + col
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .containers import atomic_write_bytes
from .errors import BoundsError, ShapeError, ValidationError


@dataclass(frozen=True)
class TokenGrid:
    frames: int
    height: int
    width: int

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def size(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def frame_offsets(self) -> np.ndarray:
        return np.arange(self.frames) * self.tokens_per_frame

    def flatten(self, frame: int, row: int, col: int) -> int:
        if not (0 <= frame < self.frames and 0 <= row < self.height and 0 <= col < self.width):
            raise BoundsError(f"position ({frame}, {row}, {col}) outside grid {self}")
        return (frame * self.height + row) * self.width + col

    def unflatten(self, index: int) -> tuple[int, int, int]:
        if not 0 <= index < self.size:
            raise BoundsError(f"token index {index} outside 0..{self.size - 1}")
        frame, rest = divmod(index, self.tokens_per_frame)
        row, col = divmod(rest, self.width)
        return frame, row, col


class LayoutVideo:
    """Validated per-frame attribute-id rasters, shape (N, H, W)."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ShapeError(f"layout must be (frames, height, width), got {labels.shape}")
        if labels.size == 0:
            raise ShapeError("layout is empty")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.array_equal(labels, np.round(labels)):
                raise ValidationError("layout labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 0:
            raise ValidationError("layout labels must be nonnegative")
        present = set(np.unique(labels).tolist())
        num_attributes = max(present)
        if num_attributes < 1:
            raise ValidationError("layout has no attributes (all pixels are background)")
        missing = sorted(set(range(1, num_attributes + 1)) - present)
        if missing:
            raise ValidationError(
                f"attribute ids must be contiguous from 0; missing {missing} below max id {num_attributes}"
            )
        labels.setflags(write=False)
        self._labels = labels
        self.num_attributes = num_attributes

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def frames(self) -> int:
        return self._labels.shape[0]

    @property
    def height(self) -> int:
        return self._labels.shape[1]

    @property
    def width(self) -> int:
        return self._labels.shape[2]

    @property
    def grid(self) -> TokenGrid:
        return TokenGrid(self.frames, self.height, self.width)

    @property
    def ids(self) -> list[int]:
        return list(range(self.num_attributes + 1))

    def flat_labels(self) -> np.ndarray:
        """Labels along the flattened spatio-temporal token axis."""
        return self._labels.reshape(-1)

    def frame_labels(self, frame: int) -> np.ndarray:
        if not 0 <= frame < self.frames:
            raise BoundsError(f"frame {frame} outside 0..{self.frames - 1}")
        return self._labels[frame].reshape(-1)

    def mask(self, frame: int, attribute: int) -> np.ndarray:
        """Flattened binary mask of ``attribute`` in ``frame``."""
        return (self.frame_labels(frame) == attribute).astype(np.float64)

    def downsample(self, height: int, width: int) -> "LayoutVideo":
        """Nearest-neighbour resampling to a coarser token grid.

        Attributes that vanish at the new resolution are rejected, since the
        result would no longer be a valid layout.
        """
        if (height, width) == (self.height, self.width):
            return self
        rows = (np.arange(height) * self.height) // height
        cols = (np.arange(width) * self.width) // width
        return LayoutVideo(self._labels[:, rows][:, :, cols])

    def __eq__(self, other):
        return isinstance(other, LayoutVideo) and np.array_equal(self._labels, other._labels)

    def __repr__(self):
        return f"LayoutVideo(frames={self.frames}, height={self.height}, width={self.width}, L={self.num_attributes})"


def load_layout(frames: Sequence) -> LayoutVideo:
    """Build a layout from a list of per-frame 2-D rasters."""
    arrays = [np.asarray(f) for f in frames]
    if not arrays:
        raise ShapeError("no frames given")
    for i, a in enumerate(arrays):
        if a.ndim != 2:
            raise ShapeError(f"frame {i} is not 2-D: shape {a.shape}")
        if a.shape != arrays[0].shape:
            raise ShapeError(f"frame {i} has shape {a.shape}, frame 0 has {arrays[0].shape}")
    return LayoutVideo(np.stack(arrays))


def attribute_of(layout: LayoutVideo, token_index: int) -> int:
    frame, row, col = layout.grid.unflatten(int(token_index))
    return int(layout.labels[frame, row, col])


@dataclass(frozen=True)
class AttributeAreas:
    """Share of all N*H*W positions covered by each attribute id (0 included)."""

    proportions: np.ndarray

    def __getitem__(self, attribute: int) -> float:
        return float(self.proportions[attribute])


def compute_areas(layout: LayoutVideo) -> AttributeAreas:
    counts = np.bincount(layout.flat_labels(), minlength=layout.num_attributes + 1)
    return AttributeAreas(counts / layout.labels.size)


@dataclass(frozen=True)
class TokenAttributeMap:
    """``entries[b]`` is the attribute of prompt token ``b``; 0 = unassociated."""

    entries: tuple[int, ...]
    tokens: tuple[str, ...] = ()

    @property
    def token_count(self) -> int:
        return len(self.entries)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.int64)

    def validate(self, layout: LayoutVideo) -> None:
        if not any(self.entries):
            raise ValidationError("token map associates no token with an attribute")
        for b, k in enumerate(self.entries):
            if k < 0 or k > layout.num_attributes:
                raise ValidationError(
                    f"token {b} refers to attribute {k}; layout has ids 0..{layout.num_attributes}"
                )


def parse_token_map(pairs: Iterable, layout: LayoutVideo) -> TokenAttributeMap:
    """Positional token map from ``(token, attribute_id)`` pairs."""
    tokens, entries = [], []
    for item in pairs:
        try:
            token, attribute = item
        except (TypeError, ValueError):
            raise ValidationError(f"token map entry {item!r} is not a (token, id) pair") from None
        if isinstance(attribute, bool) or int(attribute) != attribute:
            raise ValidationError(f"attribute id for token {token!r} is not an integer")
        tokens.append(str(token))
        entries.append(int(attribute))
    tmap = TokenAttributeMap(tuple(entries), tuple(tokens))
    tmap.validate(layout)
    return tmap


def token_pairs_from_prompt(prompt: str, phrases: dict[str, int]) -> list[tuple[str, int]]:
    """Whitespace-tokenise ``prompt`` and tag the tokens of each phrase.

    >>> token_pairs_from_prompt("An Iron Man on a snow covered court",
    ...                         {"Iron Man": 1, "snow covered court": 2})
    [('An', 0), ('Iron', 1), ('Man', 1), ('on', 0), ('a', 0), ('snow', 2), ('covered', 2), ('court', 2)]
    """
    words = prompt.split()
    ids = [0] * len(words)
    for phrase, attribute in phrases.items():
        target = phrase.split()
        n = len(target)
        hits = [i for i in range(len(words) - n + 1) if words[i : i + n] == target]
        if not hits:
            raise ValidationError(f"phrase {phrase!r} not found in prompt {prompt!r}")
        for i in hits:
            ids[i : i + n] = [attribute] * n
    return list(zip(words, ids))


# PGM (binary P5) masks ------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise ValidationError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValidationError(f"{path}: 16-bit PGM not supported")
    pos += 1  # single whitespace byte after maxval
    if len(data) < pos + width * height:
        raise ValidationError(f"{path}: expected {width * height} pixel bytes")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()


def encode_pgm(raster) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ShapeError(f"PGM raster must be 2-D, got {raster.shape}")
    if raster.min(initial=0) < 0 or raster.max(initial=0) > 255:
        raise ValidationError("PGM values must lie in 0..255")
    h, w = raster.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + raster.astype(np.uint8).tobytes()


def write_pgm(path, raster) -> None:
    atomic_write_bytes(path, encode_pgm(raster))


def read_manifest(path) -> list[Path]:
    """Frame paths listed one per line; blank lines and ``#`` comments ignored."""
    path = Path(path)
    frames = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            frames.append(path.parent / line)
    if not frames:
        raise ValidationError(f"{path}: manifest lists no frames")
    return frames


def load_layout_manifest(path) -> LayoutVideo:
    return load_layout([read_pgm(p) for p in read_manifest(path)])


def save_layout(layout: LayoutVideo, directory, manifest_name: str = "manifest.txt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(layout.frames):
        name = f"frame_{i:03d}.pgm"
        write_pgm(directory / name, layout.labels[i])
        names.append(name)
    manifest = directory / manifest_name
    atomic_write_bytes(manifest, ("\n".join(names) + "\n").encode())
    return manifest


__all__ = [
    "AttributeAreas",
    "LayoutVideo",
    "TokenAttributeMap",
    "TokenGrid",
    "attribute_of",
    "compute_areas",
    "encode_pgm",
    "load_layout",
    "load_layout_manifest",
    "parse_token_map",
    "read_manifest",
    "read_pgm",
    "save_layout",
    "token_pairs_from_prompt",
    "write_pgm",
]
