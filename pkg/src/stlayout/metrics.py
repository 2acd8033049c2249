"""Attention leakage and text-token coverage measured on attention maps.

Leakage of an attribute is the share of attention mass its query tokens put
on keys of other attributes (background is attribute 0). Coverage of a text
token is the share of its attention column that falls inside its region.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .layout import LayoutVideo, TokenAttributeMap
from .numerics import as_matrix

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AttributeLeakage:
    intra_mass: float
    leakage_ratio: float


@dataclass(frozen=True)
class TokenCoverage:
    attribute: int
    coverage: float


def _check_rows(a: np.ndarray) -> None:
    sums = a.sum(axis=1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=ROW_SUM_TOL):
        worst = float(np.abs(sums - 1.0).max())
        raise ValidationError(f"attention rows must sum to 1 (worst deviation {worst:.3g})")


def self_mass_sums(attn, layout: LayoutVideo, frame: int):
    """Per-attribute (intra, leaked, total) attention mass summed over the frame's query rows."""
    a = as_matrix(attn, "attention map")
    q_labels = layout.frame_labels(frame)
    k_labels = layout.flat_labels()
    if a.shape != (q_labels.size, k_labels.size):
        raise ShapeError(
            f"attention map {a.shape} does not match layout frame ({q_labels.size}, {k_labels.size})"
        )
    _check_rows(a)
    n_ids = layout.num_attributes + 1
    # mass each query row puts on each key attribute
    by_key = np.zeros((a.shape[0], n_ids))
    for attr in range(n_ids):
        by_key[:, attr] = a[:, k_labels == attr].sum(axis=1)
    total_row = by_key.sum(axis=1)
    intra_row = by_key[np.arange(a.shape[0]), q_labels]
    intra = np.bincount(q_labels, weights=intra_row, minlength=n_ids)
    total = np.bincount(q_labels, weights=total_row, minlength=n_ids)
    leaked = np.bincount(q_labels, weights=total_row - intra_row, minlength=n_ids)
    return intra, leaked, total


def _leakage_from_sums(intra, leaked, total) -> dict[int, AttributeLeakage]:
    out = {}
    for attr in range(len(total)):
        if total[attr] > 0:
            out[attr] = AttributeLeakage(
                float(intra[attr] / total[attr]), float(leaked[attr] / total[attr])
            )
    return out


def self_attention_leakage(attn, layout: LayoutVideo, frame: int) -> dict[int, AttributeLeakage]:
    """Intra-attribute mass and leakage ratio for every attribute present in ``frame``."""
    return _leakage_from_sums(*self_mass_sums(attn, layout, frame))


def cross_mass_sums(attn, layout: LayoutVideo, frame: int, tokens: TokenAttributeMap):
    """Per-token (mass inside its region, total column mass)."""
    a = as_matrix(attn, "attention map")
    q_labels = layout.frame_labels(frame)
    if a.shape != (q_labels.size, tokens.token_count):
        raise ShapeError(
            f"attention map {a.shape} does not match ({q_labels.size}, {tokens.token_count})"
        )
    _check_rows(a)
    k = tokens.as_array()
    inside_mask = (q_labels[:, None] == k[None, :]) & (k[None, :] != 0)
    return (a * inside_mask).sum(axis=0), a.sum(axis=0)


def _coverage_from_sums(inside, total, tokens: TokenAttributeMap) -> dict[int, TokenCoverage]:
    out = {}
    for b, attr in enumerate(tokens.entries):
        if attr == 0:
            continue
        cov = float(inside[b] / total[b]) if total[b] > 0 else 0.0
        out[b] = TokenCoverage(attr, cov)
    return out


def cross_attention_coverage(
    attn, layout: LayoutVideo, frame: int, tokens: TokenAttributeMap
) -> dict[int, TokenCoverage]:
    """Coverage for each token with a nonzero attribute; unassociated tokens are left out."""
    return _coverage_from_sums(*cross_mass_sums(attn, layout, frame, tokens), tokens)


CellKey = tuple[int, str]


@dataclass
class LeakageReport:
    """Metrics keyed by (denoising step, layer name)."""

    self_cells: dict[CellKey, dict[int, AttributeLeakage]] = field(default_factory=dict)
    cross_cells: dict[CellKey, dict[int, TokenCoverage]] = field(default_factory=dict)

    def mean_leakage(self, cell: CellKey) -> float:
        entries = self.self_cells[cell].values()
        return float(np.mean([e.leakage_ratio for e in entries]))

    def mean_coverage(self, cell: CellKey) -> float:
        entries = self.cross_cells[cell].values()
        return float(np.mean([e.coverage for e in entries]))

    def to_json_dict(self) -> dict:
        out: dict = {"self": {}, "cross": {}}
        for (step, layer), attrs in sorted(self.self_cells.items()):
            out["self"].setdefault(str(step), {})[layer] = {
                str(a): {"intra_mass": e.intra_mass, "leakage_ratio": e.leakage_ratio}
                for a, e in sorted(attrs.items())
            }
        for (step, layer), toks in sorted(self.cross_cells.items()):
            out["cross"].setdefault(str(step), {})[layer] = {
                str(b): {"attribute": e.attribute, "coverage": e.coverage}
                for b, e in sorted(toks.items())
            }
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "LeakageReport":
        rep = cls()
        for step, layers in data.get("self", {}).items():
            for layer, attrs in layers.items():
                rep.self_cells[(int(step), layer)] = {
                    int(a): AttributeLeakage(e["intra_mass"], e["leakage_ratio"])
                    for a, e in attrs.items()
                }
        for step, layers in data.get("cross", {}).items():
            for layer, toks in layers.items():
                rep.cross_cells[(int(step), layer)] = {
                    int(b): TokenCoverage(e["attribute"], e["coverage"]) for b, e in toks.items()
                }
        return rep

    def to_rows(self) -> list[dict]:
        rows = []
        for (step, layer), attrs in sorted(self.self_cells.items()):
            for a, e in sorted(attrs.items()):
                rows.append(dict(step=step, layer=layer, kind="self", index=a, attribute=a,
                                 intra_mass=e.intra_mass, leakage_ratio=e.leakage_ratio, coverage=""))
        for (step, layer), toks in sorted(self.cross_cells.items()):
            for b, e in sorted(toks.items()):
                rows.append(dict(step=step, layer=layer, kind="cross", index=b, attribute=e.attribute,
                                 intra_mass="", leakage_ratio="", coverage=e.coverage))
        return rows


def build_report(
    records: dict[tuple[int, str, int], np.ndarray],
    layouts: dict[str, LayoutVideo],
    tokens: TokenAttributeMap,
) -> LeakageReport:
    """Pool recorded maps over frames into a :class:`LeakageReport`.

    ``records`` maps (step, layer, frame) to an attention map; layers whose
    name ends in ``.cross`` are text cross-attention, the rest self-attention.
    ``layouts`` gives the layout at each layer's token resolution.
    """
    self_acc: dict = {}
    cross_acc: dict = {}
    for (step, layer, frame), attn in sorted(records.items()):
        layout = layouts[layer]
        if layer.endswith(".cross"):
            sums = cross_mass_sums(attn, layout, frame, tokens)
            acc = cross_acc.setdefault((step, layer), [0.0, 0.0])
        else:
            sums = self_mass_sums(attn, layout, frame)
            acc = self_acc.setdefault((step, layer), [0.0, 0.0, 0.0])
        for i, s in enumerate(sums):
            acc[i] = acc[i] + s
    rep = LeakageReport()
    for cell, sums in self_acc.items():
        rep.self_cells[cell] = _leakage_from_sums(*sums)
    for cell, sums in cross_acc.items():
        rep.cross_cells[cell] = _coverage_from_sums(*sums, tokens)
    return rep


@dataclass
class ComparisonSummary:
    """Differences ``b - a`` between two reports over the same cells."""

    leakage_delta: dict[CellKey, dict[int, float]]
    coverage_delta: dict[CellKey, dict[int, float]]
    mean_leakage_a: float
    mean_leakage_b: float
    mean_coverage_a: float
    mean_coverage_b: float
    cell_mean_leakage: dict[CellKey, tuple[float, float]]
    cell_mean_coverage: dict[CellKey, tuple[float, float]]

    @property
    def mean_leakage_delta(self) -> float:
        return self.mean_leakage_b - self.mean_leakage_a

    @property
    def mean_coverage_delta(self) -> float:
        return self.mean_coverage_b - self.mean_coverage_a

    def to_json_dict(self) -> dict:
        def nest(cells, fn):
            out: dict = {}
            for (step, layer), v in sorted(cells.items()):
                out.setdefault(str(step), {})[layer] = fn(v)
            return out

        return {
            "aggregate": {
                "mean_leakage_a": self.mean_leakage_a,
                "mean_leakage_b": self.mean_leakage_b,
                "mean_leakage_delta": self.mean_leakage_delta,
                "mean_coverage_a": self.mean_coverage_a,
                "mean_coverage_b": self.mean_coverage_b,
                "mean_coverage_delta": self.mean_coverage_delta,
            },
            "leakage_delta": nest(self.leakage_delta, lambda d: {str(k): v for k, v in sorted(d.items())}),
            "coverage_delta": nest(self.coverage_delta, lambda d: {str(k): v for k, v in sorted(d.items())}),
            "cell_mean_leakage": nest(self.cell_mean_leakage, lambda p: {"a": p[0], "b": p[1]}),
            "cell_mean_coverage": nest(self.cell_mean_coverage, lambda p: {"a": p[0], "b": p[1]}),
        }


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else 0.0


def compare_runs(a: LeakageReport, b: LeakageReport) -> ComparisonSummary:
    """Per-cell deltas ``b - a``; both reports must cover identical cells."""
    a = getattr(a, "leakage", a)
    b = getattr(b, "leakage", b)
    if set(a.self_cells) != set(b.self_cells) or set(a.cross_cells) != set(b.cross_cells):
        raise ValidationError("reports were sampled on different (step, layer) grids")
    leak_delta, cov_delta, cell_leak, cell_cov = {}, {}, {}, {}
    for cell in a.self_cells:
        ea, eb = a.self_cells[cell], b.self_cells[cell]
        if set(ea) != set(eb):
            raise ValidationError(f"cell {cell} covers different attributes")
        leak_delta[cell] = {k: eb[k].leakage_ratio - ea[k].leakage_ratio for k in ea}
        cell_leak[cell] = (a.mean_leakage(cell), b.mean_leakage(cell))
    for cell in a.cross_cells:
        ea, eb = a.cross_cells[cell], b.cross_cells[cell]
        if set(ea) != set(eb):
            raise ValidationError(f"cell {cell} covers different tokens")
        cov_delta[cell] = {k: eb[k].coverage - ea[k].coverage for k in ea}
        cell_cov[cell] = (a.mean_coverage(cell), b.mean_coverage(cell))
    return ComparisonSummary(
        leakage_delta=leak_delta,
        coverage_delta=cov_delta,
        mean_leakage_a=_mean([v[0] for v in cell_leak.values()]),
        mean_leakage_b=_mean([v[1] for v in cell_leak.values()]),
        mean_coverage_a=_mean([v[0] for v in cell_cov.values()]),
        mean_coverage_b=_mean([v[1] for v in cell_cov.values()]),
        cell_mean_leakage=cell_leak,
        cell_mean_coverage=cell_cov,
    )


# serialisation ---------------------------------------------------------------


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("non-finite float in metrics output")
    text = format(x, ".17g")
    return text if any(c in text for c in ".en") else text + ".0"


def _emit(obj, out: list, indent: int, level: int) -> None:
    pad = " " * (indent * (level + 1))
    end_pad = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(pad + json.dumps(str(k)) + ": ")
            _emit(v, out, indent, level + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end_pad + "}")
    elif isinstance(obj, (list, tuple)):
        out.append("[" + ", ".join(dumps(x, indent=None) for x in obj) + "]")
    elif obj is None or isinstance(obj, (bool, str)):
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int | None = 2) -> str:
    """JSON text with every float written to 17 significant digits."""
    out: list = []
    if indent is None:
        if isinstance(obj, dict):
            return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v, None)}" for k, v in obj.items()) + "}"
        _emit(obj, out, 0, 0)
        return "".join(out)
    _emit(obj, out, indent, 0)
    return "".join(out) + "\n"


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (format_float(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
