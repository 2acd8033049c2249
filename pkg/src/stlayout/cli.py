"""Command-line front end: fixture generation, edit runs and run comparison.

    stlayout generate-fixture <spec.json> <out-dir>
    stlayout run <config.json>
    stlayout compare <dir-a> <dir-b> <out-dir>

Exit status: 0 success, 2 invalid configuration or incompatible runs,
3 unreadable or malformed input files, 4 non-finite values during a run.
Set ``STLAYOUT_LOG`` (debug, info, warning, error) to change log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, containers
from .errors import NumericalError, ShapeError, ValidationError
from .fixtures import FixtureSpec, render_fixture
from .layout import LayoutVideo, encode_pgm, load_layout_manifest, parse_token_map, save_layout
from .metrics import LeakageReport, compare_runs, dumps, rows_to_csv
from .pipeline import (
    AttentionRecorder,
    EditRequest,
    FeatureVideo,
    NoiseSchedule,
    TextEmbedder,
    ToyDenoiser,
    run_edit,
)
from .st_attention import SIZE_MODES, LambdaSchedule

log = logging.getLogger("stlayout")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4


class ConfigError(ValidationError):
    """Configuration is malformed or inconsistent with its inputs."""


class InputError(Exception):
    """An input file is missing, unreadable or malformed."""


# configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration. Relative paths resolve against the config file's directory."""

    layout_manifest: str
    source_video: str
    output_dir: str
    source_tokens: tuple
    target_tokens: tuple
    blend_region: tuple
    denoiser_seed: int = 0
    text_seed: int = 0
    steps: int = 50
    active_steps: int = 15
    lambda0: float = 1.0
    beta_start: float = 0.00085
    beta_end: float = 0.012
    inversion_refine_iters: int = 3
    denoiser_width: int = 16
    denoiser_heads: int = 2
    text_dim: int = 16
    block_factors: tuple = (1, 2)
    blend_every: int = 1
    record_steps: Optional[tuple] = None
    record_layers: Optional[tuple] = None
    record_frames: tuple = (0,)
    heatmap_steps: tuple = (0,)
    size_mode: str = "key"
    chunk_size: Optional[int] = None
    base_dir: str = field(default=".", compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        names = [f.name for f in dataclasses.fields(cls) if f.name != "base_dir"]
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        required = [f.name for f in dataclasses.fields(cls) if f.default is dataclasses.MISSING]
        missing = [k for k in required if k not in data]
        if missing:
            raise ConfigError(f"missing configuration keys: {missing}")
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                kw[f.name] = _coerce(f.name, data[f.name])
        cfg = cls(base_dir=str(base_dir), **kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if f.name in ("source_tokens", "target_tokens"):
                v = [[tok, attr] for tok, attr in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        def positive(name):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

        for name in ("steps", "denoiser_width", "denoiser_heads", "text_dim"):
            positive(name)
        if not 0 <= self.active_steps <= self.steps:
            raise ConfigError(f"active_steps must lie in 0..{self.steps}")
        if not (self.lambda0 >= 0 and np.isfinite(self.lambda0)):
            raise ConfigError("lambda0 must be finite and >= 0")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.inversion_refine_iters < 0 or self.blend_every < 0:
            raise ConfigError("inversion_refine_iters and blend_every must be >= 0")
        if self.denoiser_width % self.denoiser_heads:
            raise ConfigError("denoiser_width must be divisible by denoiser_heads")
        if not self.block_factors or min(self.block_factors) < 1:
            raise ConfigError("block_factors must be a non-empty list of positive integers")
        if self.size_mode not in SIZE_MODES:
            raise ConfigError(f"size_mode must be one of {list(SIZE_MODES)}")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if not self.blend_region:
            raise ConfigError("blend_region must name at least one attribute")
        if not self.record_frames:
            raise ConfigError("record_frames must not be empty")
        for name in ("record_steps", "heatmap_steps"):
            bad = [s for s in getattr(self, name) or () if not 0 <= s < self.steps]
            if bad:
                raise ConfigError(f"{name} entries {bad} outside 0..{self.steps - 1}")
        for name in ("source_tokens", "target_tokens"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")


_INT_LISTS = ("blend_region", "block_factors", "record_steps", "record_frames", "heatmap_steps")
_INTS = ("denoiser_seed", "text_seed", "steps", "active_steps", "inversion_refine_iters",
         "denoiser_width", "denoiser_heads", "text_dim", "blend_every", "chunk_size")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(name: str, v):
    if v is None and name in ("record_steps", "record_layers", "chunk_size"):
        return None
    if name in ("layout_manifest", "source_video", "output_dir", "size_mode"):
        if not isinstance(v, str) or not v:
            raise ConfigError(f"{name} must be a non-empty string")
        return v
    if name in ("source_tokens", "target_tokens"):
        if not isinstance(v, list) or not all(
            isinstance(p, list) and len(p) == 2 and isinstance(p[0], str) and _is_int(p[1]) for p in v
        ):
            raise ConfigError(f"{name} must be a list of [token, attribute_id] pairs")
        return tuple((tok, attr) for tok, attr in v)
    if name == "record_layers":
        if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
            raise ConfigError("record_layers must be a list of layer names or null")
        return tuple(v)
    if name in _INT_LISTS:
        if not isinstance(v, list) or not all(_is_int(x) for x in v):
            raise ConfigError(f"{name} must be a list of integers")
        return tuple(v)
    if name in _INTS:
        if not _is_int(v):
            raise ConfigError(f"{name} must be an integer")
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number")
    return float(v)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data, base_dir=path.parent)


# heatmaps ---------------------------------------------------------------------


def normalize_heatmap(values) -> np.ndarray:
    """Map min to 0 and max to 255 (rounded); a constant map becomes all 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class HeatmapImage:
    name: str
    raw: np.ndarray

    @property
    def pixels(self) -> np.ndarray:
        return normalize_heatmap(self.raw)


def _nearest_to_centroid(mask: np.ndarray) -> int:
    rows, cols = np.nonzero(mask)
    cy, cx = rows.mean(), cols.mean()
    i = int(np.argmin((rows - cy) ** 2 + (cols - cx) ** 2))
    return int(rows[i] * mask.shape[1] + cols[i])


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "_", text) or "_"


def attention_heatmaps(attn: np.ndarray, layout: LayoutVideo, frame: int, layer: str,
                       token_names: tuple) -> list[tuple[str, np.ndarray]]:
    """Self-attention: the row of the query nearest each attribute's centroid,
    shown for all frames side by side (H x N*W). Cross-attention: each token's
    column as an H x W map."""
    h, w = layout.height, layout.width
    out = []
    if layer.endswith(".cross"):
        for b, tok in enumerate(token_names):
            out.append((f"tok{b}_{_slug(tok)}", attn[:, b].reshape(h, w)))
        return out
    labels = layout.frame_labels(frame).reshape(h, w)
    for attr in np.unique(labels):
        q = _nearest_to_centroid(labels == attr)
        row = attn[q].reshape(layout.frames, h, w)
        out.append((f"attr{int(attr)}", np.concatenate(list(row), axis=1)))
    return out


# output helpers -----------------------------------------------------------------


class _Outputs:
    """Writes files atomically under one directory and remembers their digests."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, str] = {}

    def write(self, rel: str, payload: bytes) -> None:
        containers.atomic_write_bytes(self.root / rel, payload)
        self.files[rel] = hashlib.sha256(payload).hexdigest()

    def text(self, rel: str, text: str) -> None:
        self.write(rel, text.encode())

    def array(self, rel: str, array: np.ndarray) -> None:
        self.write(rel, containers.encode(array))

    def heatmap(self, rel_stem: str, raw: np.ndarray) -> dict:
        self.write(rel_stem + ".pgm", encode_pgm(normalize_heatmap(raw)))
        self.array(rel_stem + ".stlv", raw[None, :, :, None])
        return {"image": rel_stem + ".pgm", "raw": rel_stem + ".stlv"}

    def manifest(self, data: dict) -> None:
        data = dict(data, outputs=dict(sorted(self.files.items())))
        containers.atomic_write_bytes(self.root / "manifest.json", dumps(data).encode())


def _read_input(what: str, loader, path: Path):
    try:
        return loader(path)
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename and str(exc.filename) != str(path) else ""
        raise InputError(f"cannot read {what} {path}{where}: {exc.strerror or exc}") from exc
    except (ValidationError, ShapeError, ValueError) as exc:
        raise InputError(f"malformed {what} {path}: {exc}") from exc


# verbs --------------------------------------------------------------------------


_ADJECTIVES = ("shiny", "striped", "golden", "wooden", "glowing", "frozen")


def template_config(spec: FixtureSpec) -> dict:
    src, tgt = [["a", 0]], [["a", 0]]
    for i, shape in enumerate(spec.shapes):
        if i:
            src.append(["and", 0])
            tgt.append(["and", 0])
        adj = _ADJECTIVES[i % len(_ADJECTIVES)] + ("" if i < len(_ADJECTIVES) else str(i))
        src.append([shape.name, i + 1])
        tgt += [[adj, i + 1], [shape.name, i + 1]]
    return {
        "layout_manifest": "layout/manifest.txt",
        "source_video": "source.stlv",
        "output_dir": "run",
        "source_tokens": src,
        "target_tokens": tgt,
        "blend_region": list(range(1, len(spec.shapes) + 1)),
    }


def generate_fixture(spec_path, out_dir) -> None:
    spec_path, out_dir = Path(spec_path), Path(out_dir)
    data = _read_input("fixture spec", lambda p: p.read_text(), spec_path)
    try:
        spec = FixtureSpec.from_dict(json.loads(data))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec_path}: invalid JSON ({exc})") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise ConfigError(f"{spec_path}: {exc}") from exc
        raise ConfigError(f"{spec_path}: invalid fixture spec ({exc})") from exc
    video, layout = render_fixture(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    containers.write(out_dir / "source.stlv", video.data)
    save_layout(layout, out_dir / "layout")
    containers.atomic_write_bytes(out_dir / "fixture.json", dumps(spec.to_dict()).encode())
    containers.atomic_write_bytes(out_dir / "config.json", dumps(template_config(spec)).encode())
    log.info("fixture written to %s (layout ids %s)", out_dir, layout.ids)


def _build(cfg: RunConfig):
    layout = _read_input("layout manifest", load_layout_manifest, cfg.path("layout_manifest"))
    source = _read_input("source video", containers.read, cfg.path("source_video"))
    if source.ndim != 4:
        raise InputError(f"source video {cfg.path('source_video')} holds a trace, not a video")
    try:
        video = FeatureVideo(source)
        if (layout.frames, layout.height, layout.width) != video.shape[:3]:
            raise ConfigError(
                f"layout is {layout.frames}x{layout.height}x{layout.width} but source video is "
                f"{video.frames}x{video.height}x{video.width}"
            )
        edit = EditRequest(
            layout=layout,
            source_tokens=parse_token_map(cfg.source_tokens, layout),
            target_tokens=parse_token_map(cfg.target_tokens, layout),
            blend_region=frozenset(cfg.blend_region),
            schedule=LambdaSchedule(cfg.steps, cfg.active_steps, cfg.lambda0),
            size_mode=cfg.size_mode,
            chunk_size=cfg.chunk_size,
            blend_every=cfg.blend_every,
        )
        denoiser = ToyDenoiser(video.channels, seed=cfg.denoiser_seed, width=cfg.denoiser_width,
                               heads=cfg.denoiser_heads, text_dim=cfg.text_dim,
                               block_factors=cfg.block_factors)
        denoiser.check_grid(video.height, video.width)
        unknown = sorted(set(cfg.record_layers or ()) - set(denoiser.layer_names()))
        if unknown:
            raise ConfigError(f"record_layers {unknown} not in {denoiser.layer_names()}")
        bad_frames = [f for f in cfg.record_frames if not 0 <= f < video.frames]
        if bad_frames:
            raise ConfigError(f"record_frames {bad_frames} outside 0..{video.frames - 1}")
        schedule = NoiseSchedule.scaled_linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    except (ValidationError, ShapeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return video, edit, denoiser, schedule


def run(config_path) -> Path:
    cfg = load_config(config_path)
    video, edit, denoiser, schedule = _build(cfg)
    steps = set(cfg.record_steps) if cfg.record_steps is not None else set(range(cfg.active_steps))
    recorder = AttentionRecorder(
        steps=steps,
        layers=set(cfg.record_layers) if cfg.record_layers is not None else None,
        frames=tuple(cfg.record_frames),
    )
    log.info("running edit: %d steps, %d modulated, lambda0=%g", cfg.steps, cfg.active_steps, cfg.lambda0)
    edited, report = run_edit(video, edit, denoiser, schedule,
                              TextEmbedder(cfg.text_seed, cfg.text_dim), recorder,
                              refine_iters=cfg.inversion_refine_iters)

    out = _Outputs(cfg.path("output_dir"))
    out.array("edited.stlv", edited.data)
    out.array("inversion_trace.stlv", report.inversion_trace)
    out.array("denoise_trace.stlv", report.denoise_trace)
    out.text("metrics.json", dumps(report.leakage.to_json_dict()))
    out.text("metrics.csv", rows_to_csv(report.leakage.to_rows()))

    from .plotting import leakage_figure

    out.write("figures/leakage.png", leakage_figure(report.leakage, f"lambda0 = {cfg.lambda0:g}"))

    heatmaps = []
    names = edit.target_tokens.tokens or tuple(str(i) for i in range(edit.target_tokens.token_count))
    for (step, layer, frame), attn in sorted(report.attention.items()):
        if step not in cfg.heatmap_steps:
            continue
        for subject, raw in attention_heatmaps(attn, report.layer_layouts[layer], frame, layer, names):
            stem = f"heatmaps/step{step:02d}_{layer}_f{frame}_{subject}"
            entry = out.heatmap(stem, raw)
            heatmaps.append(dict(step=step, layer=layer, frame=frame, subject=subject, **entry))

    out.manifest({
        "version": __version__,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seeds": {"denoiser": cfg.denoiser_seed, "text": cfg.text_seed},
        "sampling": {
            "steps": sorted({s for s, _, _ in report.attention}),
            "layers": sorted({layer for _, layer, _ in report.attention}),
            "frames": sorted({f for _, _, f in report.attention}),
        },
        "lambdas": report.lambdas,
        "blended_levels": report.blended_levels,
        "heatmaps": heatmaps,
    })
    log.info("run written to %s", out.root)
    return out.root


def _load_run(run_dir: Path):
    manifest = _read_input("run manifest", lambda p: json.loads(p.read_text()), run_dir / "manifest.json")
    metrics = _read_input("run metrics", lambda p: json.loads(p.read_text()), run_dir / "metrics.json")
    try:
        report = LeakageReport.from_json_dict(metrics)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise InputError(f"malformed run metrics {run_dir / 'metrics.json'}: {exc}") from exc
    return manifest, report


def _comparison_rows(a: LeakageReport, b: LeakageReport) -> list[dict]:
    rows = []
    for cell in sorted(a.self_cells):
        for k in sorted(a.self_cells[cell]):
            va, vb = a.self_cells[cell][k].leakage_ratio, b.self_cells[cell][k].leakage_ratio
            rows.append(dict(step=cell[0], layer=cell[1], metric="leakage_ratio", index=k, a=va, b=vb, delta=vb - va))
    for cell in sorted(a.cross_cells):
        for k in sorted(a.cross_cells[cell]):
            va, vb = a.cross_cells[cell][k].coverage, b.cross_cells[cell][k].coverage
            rows.append(dict(step=cell[0], layer=cell[1], metric="coverage", index=k, a=va, b=vb, delta=vb - va))
    return rows


def compare(dir_a, dir_b, out_dir) -> Path:
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    man_a, rep_a = _load_run(dir_a)
    man_b, rep_b = _load_run(dir_b)
    if man_a.get("sampling") != man_b.get("sampling"):
        raise ConfigError(f"runs sampled different grids: {man_a.get('sampling')} vs {man_b.get('sampling')}")
    try:
        summary = compare_runs(rep_a, rep_b)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc

    maps_a = {m["image"]: m for m in man_a.get("heatmaps", [])}
    maps_b = {m["image"]: m for m in man_b.get("heatmaps", [])}
    if set(maps_a) != set(maps_b):
        raise ConfigError("runs exported heatmaps for different (step, layer, frame) cells")

    out = _Outputs(Path(out_dir))
    body = {
        "run_a": {"dir": str(dir_a), "config_sha256": man_a.get("config_sha256")},
        "run_b": {"dir": str(dir_b), "config_sha256": man_b.get("config_sha256")},
        **summary.to_json_dict(),
    }
    out.text("comparison.json", dumps(body))
    out.text("comparison.csv", rows_to_csv(_comparison_rows(rep_a, rep_b)))

    deltas = []
    for name in sorted(maps_a):
        raw_a = _read_input("heatmap", containers.read, dir_a / maps_a[name]["raw"])
        raw_b = _read_input("heatmap", containers.read, dir_b / maps_b[name]["raw"])
        if raw_a.shape != raw_b.shape:
            raise ConfigError(f"heatmap {name} has shape {raw_a.shape} in a and {raw_b.shape} in b")
        stem = "heatmaps/delta_" + Path(name).stem
        deltas.append(dict(source=name, **out.heatmap(stem, (raw_b - raw_a)[0, :, :, 0])))

    from .plotting import comparison_figure

    out.write("figures/leakage_comparison.png", comparison_figure(summary, dir_a.name or "a", dir_b.name or "b"))
    out.manifest({"version": __version__, "delta_heatmaps": deltas})
    return out.root


# entry point ------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stlayout", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)
    g = sub.add_parser("generate-fixture", help="render a procedural source video and its layout")
    g.add_argument("spec", help="fixture spec JSON (frames, size, channels, seed, shapes)")
    g.add_argument("out_dir", help="directory for source.stlv, layout/ and config.json")
    r = sub.add_parser("run", help="invert, edit with layout-modulated attention, write metrics")
    r.add_argument("config", help="run config JSON; relative paths resolve against its directory")
    c = sub.add_parser("compare", help="per-cell metric deltas and delta heatmaps of two runs")
    c.add_argument("run_a", help="output directory of the reference run")
    c.add_argument("run_b", help="output directory of the run to compare; deltas are b - a")
    c.add_argument("out_dir", help="directory for comparison.json/.csv, heatmaps and figures")
    return p


def _configure_logging() -> None:
    level = os.environ.get("STLAYOUT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("stlayout").setLevel(getattr(logging, level, logging.WARNING))


def main(argv=None) -> int:
    _configure_logging()
    args = _parser().parse_args(argv)
    try:
        if args.verb == "generate-fixture":
            generate_fixture(args.spec, args.out_dir)
        elif args.verb == "run":
            run(args.config)
        else:
            compare(args.run_a, args.run_b, args.out_dir)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
