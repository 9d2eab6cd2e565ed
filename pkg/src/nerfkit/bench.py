"""Frame-timing benchmarks over scenes, resolutions, and upscale factors.

A run sweeps every (scene, resolution, upscale, repetition) cell: warm up for
a fixed wall-clock span, then render orbiting frames until the cell has both
its minimum duration and at least four frames. A cell is marked DNF when
three consecutive frames exceed the frame timeout. Raw per-frame times are
kept on every cell so distribution checks (medians, quartile means) never
depend on the summary.

FrameStats stores fps as data rather than deriving it on access: a report
assembled from previously published measurements can then carry its fps
column verbatim even where that column was rounded independently of the
timing column.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from io import StringIO
from pathlib import Path

import numpy as np

from .field import preset_scene
from .geometry import Camera, orbit_pose
from .renderer import RenderSettings, render_frame

DEFAULT_RESOLUTIONS = ((320, 240), (640, 480), (1280, 720), (2560, 1440))
MIN_FRAMES = 4


class BenchError(ValueError):
    """Invalid benchmark configuration or data."""


@dataclass(frozen=True)
class FrameStats:
    """Summary of one cell's frame times (milliseconds).

    fastest25/slowest25 are the means of the k fastest and k slowest frames
    with k = ceil(count / 4). fps is stored, not recomputed.
    """

    count: int
    mean_ms: float
    fastest25_ms: float
    slowest25_ms: float
    fps: float

    @classmethod
    def from_times(cls, times_ms) -> "FrameStats":
        t = np.asarray(times_ms, dtype=np.float64)
        if t.ndim != 1 or t.size < MIN_FRAMES:
            raise BenchError(f"need at least {MIN_FRAMES} frame times, got {t.size}")
        if t.min() <= 0:
            raise BenchError("frame times must be positive")
        k = math.ceil(t.size / 4)
        s = np.sort(t)
        mean = float(t.mean())
        return cls(
            count=int(t.size),
            mean_ms=mean,
            fastest25_ms=float(s[:k].mean()),
            slowest25_ms=float(s[-k:].mean()),
            fps=1000.0 / mean,
        )


@dataclass(frozen=True)
class BenchConfig:
    scenes: tuple = ("medium",)
    resolutions: tuple = DEFAULT_RESOLUTIONS
    upscale_factors: tuple = (1, 2)
    samples_per_ray: int = 32
    min_duration_s: float = 10.0
    repetitions: int = 3
    warmup_s: float = 2.0
    frame_timeout_ms: float = 2000.0
    seed: int = 0
    orbit_revolution_frames: int = 240
    fov_y: float = math.radians(60.0)

    def __post_init__(self):
        if not self.scenes:
            raise BenchError("need at least one scene")
        if not self.resolutions or any(w <= 0 or h <= 0 for w, h in self.resolutions):
            raise BenchError("resolutions must be positive (width, height) pairs")
        if not self.upscale_factors:
            raise BenchError("need at least one upscale factor")
        if self.repetitions < 1 or self.min_duration_s <= 0 or self.warmup_s < 0:
            raise BenchError("repetitions, min_duration_s, warmup_s out of range")
        if self.frame_timeout_ms <= 0 or self.samples_per_ray < 1:
            raise BenchError("frame_timeout_ms and samples_per_ray must be positive")
        object.__setattr__(self, "scenes", tuple(self.scenes))
        object.__setattr__(
            self, "resolutions", tuple((int(w), int(h)) for w, h in self.resolutions)
        )
        object.__setattr__(
            self, "upscale_factors", tuple(int(u) for u in self.upscale_factors)
        )


@dataclass
class CellResult:
    scene: str
    width: int
    height: int
    upscale: int
    repetition: int
    times_ms: list
    dnf: bool
    stats: FrameStats | None

    def median_ms(self) -> float:
        if not self.times_ms:
            raise BenchError("cell has no recorded frames")
        return float(np.median(self.times_ms))


@dataclass
class BenchReport:
    config: BenchConfig
    cells: list

    def cell(self, scene: str, width: int, height: int, upscale: int, repetition: int) -> CellResult:
        for c in self.cells:
            if (c.scene, c.width, c.height, c.upscale, c.repetition) == (
                scene,
                width,
                height,
                upscale,
                repetition,
            ):
                return c
        raise KeyError(f"no cell {scene} {width}x{height} upscale {upscale} rep {repetition}")


def _resolve_scene(entry: str):
    """Scene entry -> (label, factory). Presets by name, snapshots by path."""
    try:
        preset_scene(entry)
    except ValueError:
        pass
    else:
        return entry, lambda: preset_scene(entry)
    p = Path(entry)
    if p.is_file():
        from .snapshot import load_snapshot

        def factory():
            snap = load_snapshot(p)
            return snap.field, snap.aabb

        return p.stem, factory
    raise BenchError(f"scene {entry!r} is neither a preset name nor a snapshot file")


def run_benchmark(config: BenchConfig, render_fn=None, progress=None) -> BenchReport:
    """Execute the sweep; render_fn(field, camera, settings) is injectable."""
    if render_fn is None:
        render_fn = render_frame
    cells = []
    rng = np.random.default_rng(config.seed)
    for entry in config.scenes:
        label, factory = _resolve_scene(entry)
        for width, height in config.resolutions:
            for upscale in config.upscale_factors:
                for rep in range(config.repetitions):
                    field_obj, aabb = factory()  # fresh scene per repetition
                    settings = RenderSettings(
                        width=width,
                        height=height,
                        samples_per_ray=config.samples_per_ray,
                        upscale=upscale,
                        aabb=aabb,
                    )
                    radius = 0.8 * float(aabb.scale)
                    azimuth0 = float(rng.uniform(0, 2 * math.pi))
                    cell = _run_cell(
                        label, field_obj, settings, config, render_fn, radius, azimuth0, rep
                    )
                    cells.append(cell)
                    if progress is not None:
                        progress(cell)
    return BenchReport(config=config, cells=cells)


def _run_cell(label, field_obj, settings, config, render_fn, radius, azimuth0, rep) -> CellResult:
    center = settings.aabb.center
    step = 2 * math.pi / config.orbit_revolution_frames

    def camera(i: int) -> Camera:
        pose = orbit_pose(center, radius, azimuth0 + i * step, 0.35)
        return Camera(
            pose=pose, fov_y=config.fov_y, width=settings.width, height=settings.height
        )

    frame = 0
    warm_until = time.perf_counter() + config.warmup_s
    while True:
        render_fn(field_obj, camera(frame), settings)
        frame += 1
        if time.perf_counter() >= warm_until:
            break

    times = []
    over = 0
    dnf = False
    t_start = time.perf_counter()
    while (time.perf_counter() - t_start) < config.min_duration_s or len(times) < MIN_FRAMES:
        t0 = time.perf_counter()
        render_fn(field_obj, camera(frame), settings)
        ms = (time.perf_counter() - t0) * 1000.0
        frame += 1
        times.append(ms)
        over = over + 1 if ms > config.frame_timeout_ms else 0
        if over >= 3:
            dnf = True
            break
    stats = None if dnf else FrameStats.from_times(times)
    return CellResult(
        scene=label,
        width=settings.width,
        height=settings.height,
        upscale=settings.upscale,
        repetition=rep,
        times_ms=[float(t) for t in times],
        dnf=dnf,
        stats=stats,
    )


# --- serialization ---


def report_to_json(report: BenchReport) -> str:
    doc = {
        "config": asdict(report.config),
        "cells": [
            {
                **{k: v for k, v in asdict(c).items() if k != "stats"},
                "stats": None if c.stats is None else asdict(c.stats),
            }
            for c in report.cells
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def report_from_json(text: str) -> BenchReport:
    doc = json.loads(text)
    cfg_doc = dict(doc["config"])
    cfg_doc["resolutions"] = tuple(tuple(r) for r in cfg_doc["resolutions"])
    for key in ("scenes", "upscale_factors"):
        cfg_doc[key] = tuple(cfg_doc[key])
    config = BenchConfig(**cfg_doc)
    cells = []
    for c in doc["cells"]:
        stats = None if c["stats"] is None else FrameStats(**c["stats"])
        cells.append(
            CellResult(
                scene=c["scene"],
                width=int(c["width"]),
                height=int(c["height"]),
                upscale=int(c["upscale"]),
                repetition=int(c["repetition"]),
                times_ms=[float(t) for t in c["times_ms"]],
                dnf=bool(c["dnf"]),
                stats=stats,
            )
        )
    return BenchReport(config=config, cells=cells)


def report_to_csv(report: BenchReport) -> str:
    import csv

    out = StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(
        [
            "scene", "width", "height", "upscale", "repetition",
            "count", "mean_ms", "fastest25_ms", "slowest25_ms", "fps", "dnf",
        ]
    )
    for c in report.cells:
        s = c.stats
        w.writerow(
            [
                c.scene, c.width, c.height, c.upscale, c.repetition,
                s.count if s else "",
                f"{s.mean_ms:.4f}" if s else "",
                f"{s.fastest25_ms:.4f}" if s else "",
                f"{s.slowest25_ms:.4f}" if s else "",
                f"{s.fps:.4f}" if s else "",
                "true" if c.dnf else "false",
            ]
        )
    return out.getvalue()


def format_table(report: BenchReport) -> str:
    """Text table: one block per upscale factor, scenes as columns,
    resolutions as rows, each cell "mean_ms / fps" at two decimals.

    Repetitions of a cell are averaged; a cell that DNF'd in any repetition
    prints DNF.
    """
    scenes = list(dict.fromkeys(c.scene for c in report.cells))
    resolutions = list(dict.fromkeys((c.width, c.height) for c in report.cells))
    upscales = list(dict.fromkeys(c.upscale for c in report.cells))

    def summarize(scene, wh, u):
        reps = [
            c
            for c in report.cells
            if (c.scene, (c.width, c.height), c.upscale) == (scene, wh, u)
        ]
        if not reps:
            return ""
        if any(c.dnf for c in reps):
            return "DNF"
        mean = np.mean([c.stats.mean_ms for c in reps])
        fps = np.mean([c.stats.fps for c in reps])
        return f"{mean:.2f} / {fps:.2f}"

    blocks = []
    for u in upscales:
        grid = [[summarize(s, wh, u) for s in scenes] for wh in resolutions]
        labels = [f"{w}x{h}" for w, h in resolutions]
        w_res = max(len("resolution"), *(len(l) for l in labels))
        widths = [
            max(len(scenes[j]), *(len(grid[i][j]) for i in range(len(resolutions))))
            for j in range(len(scenes))
        ]
        lines = [f"frame time ms / fps, upscale {u}x"]
        header = " | ".join(
            ["resolution".ljust(w_res)] + [s.ljust(widths[j]) for j, s in enumerate(scenes)]
        )
        lines.append(header.rstrip())
        for i, wh in enumerate(resolutions):
            row = " | ".join(
                [labels[i].ljust(w_res)]
                + [grid[i][j].ljust(widths[j]) for j in range(len(scenes))]
            )
            lines.append(row.rstrip())
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
