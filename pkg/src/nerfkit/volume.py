"""Dense volume export and direct grid raycasting.

A VolumeGrid stores density and color sampled at cell centers: along each
axis, sample i sits at min + (i + 0.5) * side / n. Arrays are indexed
(z, y, x) in C order, so x varies fastest in memory.

Two on-disk forms live side by side with a meta.json:

* raw: one volume.raw holding the density block followed by the r, g and b
  blocks, each a full (nz, ny, nx) float32-LE volume. Lossless.
* png: one RGBA image per z slice; rgb is the color, alpha is density
  normalized by the density_range recorded in meta.json, so raw density is
  recoverable within range/255.

Raycasting a grid reuses the volumetric renderer unchanged: a GridField
adapter exposes trilinear interpolation plus a transfer function through the
same eval_batch protocol as a trained field, and six-DoF manipulation enters
as the renderer's scene similarity transform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .geometry import Aabb, Camera, Similarity
from .images import Image
from .renderer import RenderSettings, render_frame

CANONICAL_VIEW_DIR = (0.0, 0.0, -1.0)
DEFAULT_CELL_BUDGET = 512**3
META_VERSION = 1


class VolumeError(ValueError):
    """Base for volume export/import failures."""


class VolumeBudgetError(VolumeError):
    """Requested grid exceeds the cell budget."""


class MissingSliceError(VolumeError):
    """A slice file named by the metadata is absent."""


class MetadataMismatchError(VolumeError):
    """Files on disk disagree with meta.json."""


@dataclass
class VolumeGrid:
    """Cell-centered density and color samples over a box."""

    aabb: Aabb
    density: np.ndarray  # (nz, ny, nx) float32, >= 0
    rgb: np.ndarray  # (nz, ny, nx, 3) float32 in [0, 1]

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float32)
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise VolumeError(
                f"density must be (nz, ny, nx) with every side >= 2, got {self.density.shape}"
            )
        if self.rgb.shape != self.density.shape + (3,):
            raise VolumeError(
                f"rgb shape {self.rgb.shape} does not match density {self.density.shape}"
            )
        if self.density.min() < 0:
            raise VolumeError("density must be non-negative")

    @property
    def resolution(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        nz, ny, nx = self.density.shape
        return nx, ny, nz

    def cell_centers_z(self, iz: int) -> np.ndarray:
        """World positions of one z slice's cell centers, shape (ny, nx, 3)."""
        nx, ny, nz = self.resolution
        return _centers_slab(self.aabb, nx, ny, nz, iz)


def _centers_slab(aabb: Aabb, nx: int, ny: int, nz: int, iz: int) -> np.ndarray:
    size = aabb.size.astype(np.float64)
    xs = aabb.min[0] + (np.arange(nx) + 0.5) * size[0] / nx
    ys = aabb.min[1] + (np.arange(ny) + 0.5) * size[1] / ny
    z = aabb.min[2] + (iz + 0.5) * size[2] / nz
    out = np.empty((ny, nx, 3), dtype=np.float32)
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    out[:, :, 2] = z
    return out


def export_volume(
    field,
    aabb: Aabb,
    resolution,
    cell_budget: int = DEFAULT_CELL_BUDGET,
) -> VolumeGrid:
    """Sample a field on a cell-centered grid inside aabb.

    resolution is (nx, ny, nz) or a single int for a cube. Colors are baked
    for the canonical view direction (0, 0, -1), since the grid cannot keep
    view dependence. Raises VolumeBudgetError beyond cell_budget cells.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution, resolution)
    nx, ny, nz = (int(r) for r in resolution)
    if min(nx, ny, nz) < 2:
        raise VolumeError("need at least 2 samples per axis")
    total = nx * ny * nz
    if total > cell_budget:
        raise VolumeBudgetError(
            f"{nx}x{ny}x{nz} = {total} cells exceeds the budget of {cell_budget}"
        )
    density = np.empty((nz, ny, nx), dtype=np.float32)
    rgb = np.empty((nz, ny, nx, 3), dtype=np.float32)
    view = np.asarray(CANONICAL_VIEW_DIR, dtype=np.float32)
    for iz in range(nz):
        pts = _centers_slab(aabb, nx, ny, nz, iz).reshape(-1, 3)
        dirs = np.broadcast_to(view, pts.shape)
        sigma, color = field.eval_batch(pts, dirs)
        density[iz] = sigma.reshape(ny, nx)
        rgb[iz] = color.reshape(ny, nx, 3)
    return VolumeGrid(aabb, density, rgb)


def _meta_dict(grid: VolumeGrid, fmt: str) -> dict:
    nx, ny, nz = grid.resolution
    return {
        "version": META_VERSION,
        "format": fmt,
        "resolution": [nx, ny, nz],
        "aabb": {
            "min": grid.aabb.min.astype(float).tolist(),
            "max": grid.aabb.max.astype(float).tolist(),
        },
        "density_range": [0.0, float(grid.density.max())],
    }


def write_slices(grid: VolumeGrid, out_dir, fmt: str = "raw") -> Path:
    """Write the grid plus meta.json into out_dir; returns the meta path."""
    if fmt not in ("raw", "png"):
        raise VolumeError(f"format must be 'raw' or 'png', got {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = _meta_dict(grid, fmt)
    if fmt == "raw":
        with open(out_dir / "volume.raw", "wb") as f:
            f.write(np.ascontiguousarray(grid.density, dtype="<f4").tobytes())
            for c in range(3):
                f.write(np.ascontiguousarray(grid.rgb[..., c], dtype="<f4").tobytes())
    else:
        hi = meta["density_range"][1]
        scale = 255.0 / hi if hi > 0 else 0.0
        nz = grid.density.shape[0]
        for iz in range(nz):
            rgba = np.empty(grid.rgb.shape[1:3] + (4,), dtype=np.uint8)
            rgba[..., :3] = np.round(np.clip(grid.rgb[iz], 0, 1) * 255).astype(np.uint8)
            rgba[..., 3] = np.round(grid.density[iz] * scale).astype(np.uint8)
            PilImage.fromarray(rgba, mode="RGBA").save(out_dir / f"slice_{iz:04d}.png")
    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return meta_path


def read_slices(in_dir) -> VolumeGrid:
    """Rebuild a VolumeGrid from a directory written by write_slices."""
    in_dir = Path(in_dir)
    meta_path = in_dir / "meta.json"
    if not meta_path.is_file():
        raise MissingSliceError(f"no meta.json in {in_dir}")
    try:
        meta = json.loads(meta_path.read_text())
        fmt = meta["format"]
        nx, ny, nz = (int(v) for v in meta["resolution"])
        aabb = Aabb(
            np.asarray(meta["aabb"]["min"], np.float32),
            np.asarray(meta["aabb"]["max"], np.float32),
        )
        range_hi = float(meta["density_range"][1])
    except (KeyError, TypeError, ValueError) as e:
        raise MetadataMismatchError(f"{meta_path}: malformed metadata ({e})") from e

    if fmt == "raw":
        raw_path = in_dir / "volume.raw"
        if not raw_path.is_file():
            raise MissingSliceError(f"{raw_path} is missing")
        blob = raw_path.read_bytes()
        expected = nx * ny * nz * 4 * 4
        if len(blob) != expected:
            raise MetadataMismatchError(
                f"{raw_path}: {len(blob)} bytes, metadata implies {expected}"
            )
        vol = np.frombuffer(blob, dtype="<f4").reshape(4, nz, ny, nx)
        rgb = np.moveaxis(vol[1:4], 0, -1)
        return VolumeGrid(aabb, vol[0].copy(), rgb.copy())
    if fmt == "png":
        density = np.empty((nz, ny, nx), dtype=np.float32)
        rgb = np.empty((nz, ny, nx, 3), dtype=np.float32)
        for iz in range(nz):
            p = in_dir / f"slice_{iz:04d}.png"
            if not p.is_file():
                raise MissingSliceError(f"slice {iz} is missing: {p}")
            with PilImage.open(p) as im:
                arr = np.asarray(im.convert("RGBA"))
            if arr.shape[:2] != (ny, nx):
                raise MetadataMismatchError(
                    f"slice {iz}: {arr.shape[1]}x{arr.shape[0]}, metadata says {nx}x{ny}"
                )
            rgb[iz] = arr[..., :3].astype(np.float32) / 255.0
            density[iz] = arr[..., 3].astype(np.float32) / 255.0 * range_hi
        return VolumeGrid(aabb, density, rgb)
    raise MetadataMismatchError(f"{meta_path}: unknown format {fmt!r}")


@dataclass(frozen=True)
class TransferFunction:
    """Piecewise-linear density -> (opacity multiplier, optional tint).

    points are (density, opacity, tint) with non-decreasing densities and
    opacity in [0, 1]; tint is an rgb triple on every point or on none.
    Densities outside the covered range clamp to the end points.
    """

    points: tuple

    def __post_init__(self):
        pts = tuple(
            (float(v), float(o), None if t is None else tuple(float(c) for c in t))
            for v, o, t in self.points
        )
        if len(pts) < 2:
            raise VolumeError("a transfer function needs at least two points")
        values = [p[0] for p in pts]
        if any(b < a for a, b in zip(values, values[1:])):
            raise VolumeError("transfer point densities must be non-decreasing")
        if any(not (0.0 <= p[1] <= 1.0) for p in pts):
            raise VolumeError("opacity multipliers must be in [0, 1]")
        tints = [p[2] for p in pts]
        if any(t is not None for t in tints) and any(t is None for t in tints):
            raise VolumeError("either every point has a tint or none does")
        object.__setattr__(self, "points", pts)

    @classmethod
    def identity(cls) -> "TransferFunction":
        return cls(((0.0, 1.0, None), (1.0, 1.0, None)))

    @property
    def has_tint(self) -> bool:
        return self.points[0][2] is not None

    def evaluate(self, density: np.ndarray):
        """(multiplier (N,), tint (N, 3) or None) for densities (N,)."""
        d = np.asarray(density, dtype=np.float32)
        xs = np.array([p[0] for p in self.points], dtype=np.float32)
        opacity = np.interp(d, xs, np.array([p[1] for p in self.points], np.float32))
        tint = None
        if self.has_tint:
            tint = np.stack(
                [
                    np.interp(d, xs, np.array([p[2][c] for p in self.points], np.float32))
                    for c in range(3)
                ],
                axis=-1,
            ).astype(np.float32)
        return opacity.astype(np.float32), tint


@dataclass
class GridField:
    """Trilinear view of a VolumeGrid behind the field eval protocol.

    Sampling happens on the cell-center lattice with constant extension in
    the half-cell border, so stored values are reproduced exactly at cell
    centers. The transfer function scales density and optionally replaces
    color.
    """

    grid: VolumeGrid
    transfer: TransferFunction = None

    def __post_init__(self):
        if self.transfer is None:
            self.transfer = TransferFunction.identity()

    def eval_batch(self, positions, directions):
        g = self.grid
        p = np.asarray(positions, dtype=np.float32)
        nx, ny, nz = g.resolution
        n_axis = np.array([nx, ny, nz], dtype=np.float32)
        rel = (p - g.aabb.min) / g.aabb.size * n_axis - 0.5
        rel = np.clip(rel, 0.0, n_axis - 1.0)
        i0 = np.minimum(np.floor(rel).astype(np.int64), (n_axis - 2).astype(np.int64))
        f = rel - i0

        dens_flat = g.density.reshape(-1)
        rgb_flat = g.rgb.reshape(-1, 3)
        dens = np.zeros(p.shape[0], dtype=np.float32)
        rgb = np.zeros((p.shape[0], 3), dtype=np.float32)
        for k in range(8):
            cx, cy, cz = k & 1, (k >> 1) & 1, k >> 2
            w = (
                (f[:, 0] if cx else 1 - f[:, 0])
                * (f[:, 1] if cy else 1 - f[:, 1])
                * (f[:, 2] if cz else 1 - f[:, 2])
            )
            flat = ((i0[:, 2] + cz) * ny + (i0[:, 1] + cy)) * nx + (i0[:, 0] + cx)
            dens += w * dens_flat[flat]
            rgb += w[:, None] * rgb_flat[flat]

        mult, tint = self.transfer.evaluate(dens)
        sigma = dens * mult
        return sigma, tint if tint is not None else rgb


def raycast_grid(
    grid: VolumeGrid,
    camera: Camera,
    settings: RenderSettings,
    transfer: TransferFunction | None = None,
    manipulation: Similarity | None = None,
) -> Image:
    """Render the grid with the shared volumetric renderer.

    The grid's own box replaces settings.aabb; a manipulation similarity,
    when given, replaces the settings' scene transform.
    """
    adapted = replace(
        settings,
        aabb=grid.aabb,
        scene_transform=manipulation
        if manipulation is not None
        else settings.scene_transform,
    )
    return render_frame(GridField(grid, transfer), camera, adapted)
