"""Matplotlib figures for run and comparison reports."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ComparisonSummary, LeakageReport  # noqa: E402

# PNG metadata carries no version or timestamp, so figures are reproducible.
_SAVE_KW = dict(format="png", dpi=110, metadata={"Software": None})


def _layers(cells):
    return sorted({layer for _, layer in cells})


def _series(cells, layer, value):
    steps = sorted(step for step, name in cells if name == layer)
    return steps, [value((step, layer)) for step in steps]


def _to_png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, **_SAVE_KW)
    plt.close(fig)
    return buf.getvalue()


def leakage_figure(report: LeakageReport, title: str = "") -> bytes:
    """Mean self-attention leakage and mean token coverage per recorded step."""
    fig, (ax_l, ax_c) = plt.subplots(1, 2, figsize=(9, 3.4))
    for layer in _layers(report.self_cells):
        ax_l.plot(*_series(report.self_cells, layer, report.mean_leakage), marker="o", ms=3, label=layer)
    for layer in _layers(report.cross_cells):
        ax_c.plot(*_series(report.cross_cells, layer, report.mean_coverage), marker="o", ms=3, label=layer)
    ax_l.set(xlabel="denoising step", ylabel="mean leakage ratio", ylim=(0, 1))
    ax_c.set(xlabel="denoising step", ylabel="mean token coverage", ylim=(0, 1))
    for ax in (ax_l, ax_c):
        ax.legend(fontsize=7, frameon=False)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _to_png(fig)


def comparison_figure(summary: ComparisonSummary, label_a: str = "a", label_b: str = "b") -> bytes:
    fig, (ax_l, ax_c) = plt.subplots(1, 2, figsize=(9, 3.4))
    for ax, cells, ylabel in (
        (ax_l, summary.cell_mean_leakage, "mean leakage ratio"),
        (ax_c, summary.cell_mean_coverage, "mean token coverage"),
    ):
        for i, layer in enumerate(_layers(cells)):
            steps = sorted(s for s, name in cells if name == layer)
            a = [cells[(s, layer)][0] for s in steps]
            b = [cells[(s, layer)][1] for s in steps]
            color = f"C{i}"
            ax.plot(steps, a, ls="--", color=color, label=f"{layer} ({label_a})")
            ax.plot(steps, b, ls="-", color=color, label=f"{layer} ({label_b})")
        ax.set(xlabel="denoising step", ylabel=ylabel, ylim=(0, 1))
        ax.legend(fontsize=6, frameon=False)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _to_png(fig)


def heatmap_figure(raster: np.ndarray, title: str = "") -> bytes:
    fig, ax = plt.subplots(figsize=(max(2.5, raster.shape[1] / raster.shape[0] * 2.5), 2.8))
    im = ax.imshow(raster, cmap="magma", interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    return _to_png(fig)
