"""Procedural source videos: moving shapes with per-attribute feature signatures."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .layout import LayoutVideo
from .pipeline import FeatureVideo


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    kind: str = "rect"  # "rect" or "ellipse"
    center: tuple = (0.0, 0.0)  # (row, col) at frame 0, pixel units
    size: tuple = (4.0, 4.0)  # (height, width)
    velocity: tuple = (0.0, 0.0)  # (row, col) per frame

    def mask(self, frame: int, height: int, width: int) -> np.ndarray:
        cy = self.center[0] + self.velocity[0] * frame
        cx = self.center[1] + self.velocity[1] * frame
        ry, rx = self.size[0] / 2, self.size[1] / 2
        r = np.arange(height)[:, None] + 0.5
        c = np.arange(width)[None, :] + 0.5
        if self.kind == "rect":
            return (np.abs(r - cy) < ry) & (np.abs(c - cx) < rx)
        if self.kind == "ellipse":
            return ((r - cy) / ry) ** 2 + ((c - cx) / rx) ** 2 <= 1.0
        raise ValidationError(f"unknown shape kind {self.kind!r}")


@dataclass(frozen=True)
class FixtureSpec:
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 8
    seed: int = 0
    shapes: tuple = field(default_factory=tuple)
    texture: float = 0.3
    noise: float = 0.05

    @classmethod
    def from_dict(cls, data: dict) -> "FixtureSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown fixture keys: {unknown}")
        data = dict(data)
        shapes = []
        for s in data.pop("shapes", []):
            extra = sorted(set(s) - set(ShapeSpec.__dataclass_fields__))
            if extra:
                raise ValidationError(f"unknown shape keys: {extra}")
            s = dict(s)
            for key in ("center", "size", "velocity"):
                if key in s:
                    s[key] = tuple(float(v) for v in s[key])
            shapes.append(ShapeSpec(**s))
        spec = cls(shapes=tuple(shapes), **data)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [
            {**asdict(s), "center": list(s.center), "size": list(s.size), "velocity": list(s.velocity)}
            for s in self.shapes
        ]
        return d

    def validate(self) -> None:
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ValidationError("fixture dimensions must be positive")
        if not self.shapes:
            raise ValidationError("fixture needs at least one shape")
        for s in self.shapes:
            if s.kind not in ("rect", "ellipse"):
                raise ValidationError(f"unknown shape kind {s.kind!r}")


def standard_fixture_spec() -> FixtureSpec:
    """8 frames of 16x16x8: a rectangle moving right and an ellipse moving left above it."""
    return FixtureSpec(
        frames=8, height=16, width=16, channels=8, seed=0,
        shapes=(
            ShapeSpec("man", "rect", center=(9.0, 4.0), size=(6.0, 4.0), velocity=(0.0, 1.0)),
            ShapeSpec("ball", "ellipse", center=(3.0, 13.0), size=(4.0, 4.0), velocity=(0.0, -1.0)),
        ),
    )


def render_layout(spec: FixtureSpec) -> LayoutVideo:
    """Attribute ``i + 1`` for shape ``i``; later shapes cover earlier ones."""
    labels = np.zeros((spec.frames, spec.height, spec.width), dtype=np.int64)
    for t in range(spec.frames):
        for i, shape in enumerate(spec.shapes):
            labels[t][shape.mask(t, spec.height, spec.width)] = i + 1
    return LayoutVideo(labels)


def render_fixture(spec: FixtureSpec) -> tuple[FeatureVideo, LayoutVideo]:
    spec.validate()
    layout = render_layout(spec)
    rng = np.random.default_rng(spec.seed)
    n_attr = len(spec.shapes) + 1
    signatures = rng.standard_normal((n_attr, spec.channels))
    phases = rng.uniform(0, 2 * np.pi, size=(n_attr, spec.channels))
    noise = rng.standard_normal((spec.frames, spec.height, spec.width, spec.channels))

    rows = np.arange(spec.height)[:, None, None]
    cols = np.arange(spec.width)[None, :, None]
    data = np.empty((spec.frames, spec.height, spec.width, spec.channels))
    for t in range(spec.frames):
        for attr in range(n_attr):
            # texture moves with its shape; background texture is static
            vy, vx = spec.shapes[attr - 1].velocity if attr else (0.0, 0.0)
            tex = np.sin(0.9 * (rows - vy * t) + 1.3 * (cols - vx * t) + phases[attr])
            sel = layout.labels[t] == attr
            data[t][sel] = (signatures[attr] + spec.texture * tex)[sel]
    data += spec.noise * noise
    return FeatureVideo(data), layout
