"""Radiance field: multi-resolution hash encoding plus two small MLPs.

A field maps (position, view direction) to (density, rgb). Positions are
normalized into [0, 1]^3 against the scene box before encoding. Every level
of the encoding is a virtual grid of resolution N_l; levels whose full vertex
lattice fits in the hash table are stored densely, finer ones share slots
through a spatial hash. Features from all levels feed a density MLP whose
first output is log-density; its remaining outputs plus a frequency encoding
of the view direction feed a color MLP.

All forward/backward code is dtype-generic: it follows the dtype of the
parameter arrays, so gradient checks can run the same code in float64 while
production runs float32. Gradients are exact reverse-mode derivatives of the
forward pass, accumulated with deterministic scatter-adds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Iterator, Protocol

import numpy as np

from .geometry import Aabb

HASH_PRIMES = (1, 2654435761, 805459861)


class DomainError(ValueError):
    """A position was evaluated outside the field's scene box."""


@dataclass(frozen=True)
class HashGridConfig:
    """Shape of the multi-resolution hash encoding."""

    levels: int = 8
    features_per_level: int = 2
    table_size: int = 2**14
    base_resolution: int = 16
    max_resolution: int = 256

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.features_per_level < 1:
            raise ValueError("need at least one feature per level")
        if self.table_size < 2 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if not (1 <= self.base_resolution <= self.max_resolution):
            raise ValueError("need 1 <= base_resolution <= max_resolution")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )

    def level_resolution(self, level: int) -> int:
        if not (0 <= level < self.levels):
            raise ValueError(f"level {level} out of range")
        return int(round(self.base_resolution * self.growth**level))

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.level_resolution(l) for l in range(self.levels))

    def level_is_dense(self, level: int) -> bool:
        n = self.level_resolution(level) + 1
        return n * n * n <= self.table_size

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level


@dataclass(frozen=True)
class MlpConfig:
    """Widths of the density and color heads."""

    hidden_width: int = 32
    density_layers: int = 2
    color_layers: int = 2
    latent_dim: int = 15
    dir_encoding_degree: int = 4

    def __post_init__(self):
        if min(self.hidden_width, self.density_layers, self.color_layers) < 1:
            raise ValueError("widths and depths must be positive")
        if self.latent_dim < 1 or self.dir_encoding_degree < 1:
            raise ValueError("latent_dim and dir_encoding_degree must be positive")

    @property
    def dir_dim(self) -> int:
        return 6 * self.dir_encoding_degree


SIGMA_CLIP_HI = 10.0
SIGMA_CLIP_LO = -60.0  # only avoids float32 denormals, far below useful range


def dense_corner_index(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Row-major vertex index x + y*(N+1) + z*(N+1)^2 on an N-cell grid."""
    c = np.asarray(coords, dtype=np.int64)
    stride = resolution + 1
    return c[..., 0] + c[..., 1] * stride + c[..., 2] * stride * stride


def hash_corner_index(coords: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer vertex coordinates into [0, table_size).

    XOR of per-axis products with fixed primes, in wrapping uint32
    arithmetic, masked by table_size - 1.
    """
    c = np.asarray(coords, dtype=np.int64).astype(np.uint32)
    h = c[..., 0] * np.uint32(HASH_PRIMES[0])
    h ^= c[..., 1] * np.uint32(HASH_PRIMES[1])
    h ^= c[..., 2] * np.uint32(HASH_PRIMES[2])
    return (h & np.uint32(table_size - 1)).astype(np.int64)


def _level_corners(u: np.ndarray, resolution: int, table_size: int, dense: bool):
    """Corner slot indices (8, N) and trilinear weights (8, N) for one level.

    Corner k carries bits (cx, cy, cz) = (k & 1, (k >> 1) & 1, k >> 2). The
    upper edge u = 1 lands on the last cell with fractional coordinate 1, so
    interpolation stays exact across the whole closed interval [0, 1].
    """
    dtype = u.dtype
    s = u * dtype.type(resolution)
    i0 = np.floor(s).astype(np.int64)
    np.clip(i0, 0, resolution - 1, out=i0)
    f = s - i0

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    wz = (1 - fz, fz)

    n = u.shape[0]
    idx = np.empty((8, n), dtype=np.int64)
    w = np.empty((8, n), dtype=dtype)
    if dense:
        stride_y = resolution + 1
        stride_z = stride_y * stride_y
        base = i0[:, 0] + i0[:, 1] * stride_y + i0[:, 2] * stride_z
        for k in range(8):
            cx, cy, cz = k & 1, (k >> 1) & 1, k >> 2
            idx[k] = base + (cx + cy * stride_y + cz * stride_z)
            w[k] = wx[cx] * wy[cy] * wz[cz]
    else:
        mask = np.uint32(table_size - 1)
        p1, p2 = np.uint32(HASH_PRIMES[1]), np.uint32(HASH_PRIMES[2])
        ux = (i0[:, 0].astype(np.uint32), (i0[:, 0] + 1).astype(np.uint32))
        uy = (
            i0[:, 1].astype(np.uint32) * p1,
            (i0[:, 1] + 1).astype(np.uint32) * p1,
        )
        uz = (
            i0[:, 2].astype(np.uint32) * p2,
            (i0[:, 2] + 1).astype(np.uint32) * p2,
        )
        for k in range(8):
            cx, cy, cz = k & 1, (k >> 1) & 1, k >> 2
            idx[k] = ((ux[cx] ^ uy[cy] ^ uz[cz]) & mask).astype(np.int64)
            w[k] = wx[cx] * wy[cy] * wz[cz]
    return idx, w


def encode_forward(u: np.ndarray, tables: list[np.ndarray], cfg: HashGridConfig, keep_cache: bool = True):
    """Interpolate per-level features at normalized positions u (N, 3).

    Returns (features (N, levels*F), cache). The cache holds the corner
    indices and weights needed by encode_backward; pass keep_cache=False on
    evaluation-only paths.
    """
    n = u.shape[0]
    f_per = cfg.features_per_level
    feats = np.empty((n, cfg.feature_dim), dtype=tables[0].dtype)
    cache = [] if keep_cache else None
    for level, tab in enumerate(tables):
        res = cfg.level_resolution(level)
        idx, w = _level_corners(u, res, cfg.table_size, cfg.level_is_dense(level))
        gathered = tab[idx]  # (8, N, F)
        feats[:, level * f_per : (level + 1) * f_per] = (
            gathered * w[:, :, None]
        ).sum(axis=0)
        if keep_cache:
            cache.append((idx, w))
    return feats, cache


def encode_backward(dfeats: np.ndarray, cache, cfg: HashGridConfig, tables: list[np.ndarray]):
    """Scatter feature gradients back into per-level table gradients.

    Uses bincount per feature column: deterministic accumulation order, so
    repeated runs produce bit-identical gradients.
    """
    dtype = tables[0].dtype
    f_per = cfg.features_per_level
    dtables = []
    for level, tab in enumerate(tables):
        idx, w = cache[level]
        dlevel = dfeats[:, level * f_per : (level + 1) * f_per]
        contrib = w[:, :, None] * dlevel[None, :, :]  # (8, N, F)
        flat_idx = idx.reshape(-1)
        flat = contrib.reshape(-1, f_per)
        dtab = np.empty_like(tab)
        for col in range(f_per):
            dtab[:, col] = np.bincount(
                flat_idx, weights=flat[:, col], minlength=tab.shape[0]
            ).astype(dtype)
        dtables.append(dtab)
    return dtables


def encode_directions(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Frequency features [sin(2^k d), cos(2^k d)] for k < degree, per axis."""
    d = np.asarray(dirs)
    out = np.empty((d.shape[0], 6 * degree), dtype=d.dtype)
    for k in range(degree):
        scaled = d * d.dtype.type(2.0**k)
        out[:, 6 * k : 6 * k + 3] = np.sin(scaled)
        out[:, 6 * k + 3 : 6 * k + 6] = np.cos(scaled)
    return out


def mlp_forward(x: np.ndarray, weights: list[np.ndarray], biases: list[np.ndarray]):
    """Linear layers with ReLU between them, linear output. Returns (y, cache)."""
    acts = [x]
    pre = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0) if i < last else z
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(dout: np.ndarray, cache, weights: list[np.ndarray]):
    """Gradients for mlp_forward: per-layer (dW, db) lists plus input grad."""
    acts, pre = cache
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    dz = dout
    for i in reversed(range(len(weights))):
        grads_w[i] = acts[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        dx = dz @ weights[i].T
        if i > 0:
            dz = dx * (pre[i - 1] > 0)
    return grads_w, grads_b, dx


@dataclass
class FieldParams:
    """All trainable arrays of one field, addressable by block name."""

    tables: list[np.ndarray]
    density_w: list[np.ndarray]
    density_b: list[np.ndarray]
    color_w: list[np.ndarray]
    color_b: list[np.ndarray]

    @property
    def dtype(self):
        return self.tables[0].dtype

    def blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, t in enumerate(self.tables):
            yield f"table{i}", t
        for name, group in (
            ("density_w", self.density_w),
            ("density_b", self.density_b),
            ("color_w", self.color_w),
            ("color_b", self.color_b),
        ):
            for i, a in enumerate(group):
                yield f"{name}{i}", a

    def set_block(self, name: str, value: np.ndarray) -> None:
        if name.startswith("table"):
            self.tables[int(name[5:])] = value
            return
        for prefix, group in (
            ("density_w", self.density_w),
            ("density_b", self.density_b),
            ("color_w", self.color_w),
            ("color_b", self.color_b),
        ):
            if name.startswith(prefix) and name[len(prefix) :].isdigit():
                group[int(name[len(prefix) :])] = value
                return
        raise KeyError(name)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(
            [t.astype(dtype) for t in self.tables],
            [w.astype(dtype) for w in self.density_w],
            [b.astype(dtype) for b in self.density_b],
            [w.astype(dtype) for w in self.color_w],
            [b.astype(dtype) for b in self.color_b],
        )

    def copy(self) -> "FieldParams":
        return self.astype(self.dtype)

    @property
    def num_parameters(self) -> int:
        return sum(a.size for _, a in self.blocks())


def init_field_params(
    grid_cfg: HashGridConfig,
    mlp_cfg: MlpConfig,
    seed: int,
    dtype=np.float32,
) -> FieldParams:
    """Seeded init: tiny uniform hash features, He-scaled normal MLP weights.

    Small table features keep the initial field featureless so early training
    is driven by the optimizer rather than by init noise.
    """
    rng = np.random.default_rng(seed)
    tables = [
        rng.uniform(-1e-4, 1e-4, size=(grid_cfg.table_size, grid_cfg.features_per_level)).astype(dtype)
        for _ in range(grid_cfg.levels)
    ]

    def make_mlp(sizes):
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            std = math.sqrt(2.0 / fan_in)
            ws.append(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
        return ws, bs

    density_sizes = (
        [grid_cfg.feature_dim]
        + [mlp_cfg.hidden_width] * mlp_cfg.density_layers
        + [1 + mlp_cfg.latent_dim]
    )
    color_sizes = (
        [mlp_cfg.latent_dim + mlp_cfg.dir_dim]
        + [mlp_cfg.hidden_width] * mlp_cfg.color_layers
        + [3]
    )
    dw, db = make_mlp(density_sizes)
    cw, cb = make_mlp(color_sizes)
    return FieldParams(tables, dw, db, cw, cb)


def normalize_positions(positions: np.ndarray, aabb: Aabb, dtype) -> np.ndarray:
    """Map world positions into [0, 1]^3; DomainError if any point is outside."""
    p = np.asarray(positions, dtype=dtype)
    lo = aabb.min.astype(dtype)
    size = aabb.size.astype(dtype)
    u = (p - lo) / size
    if u.size and (u.min() < -1e-5 or u.max() > 1 + 1e-5):
        bad = np.argmax(np.any((u < -1e-5) | (u > 1 + 1e-5), axis=-1))
        raise DomainError(
            f"position {np.asarray(positions)[bad]} outside scene box "
            f"[{aabb.min}, {aabb.max}]"
        )
    return np.clip(u, 0.0, 1.0)


def field_forward(
    u: np.ndarray,
    dirs: np.ndarray,
    params: FieldParams,
    grid_cfg: HashGridConfig,
    mlp_cfg: MlpConfig,
    keep_cache: bool = True,
):
    """Evaluate the field at normalized positions u with unit view dirs.

    Returns (sigma (N,), rgb (N, 3), cache). Density is exp of the first
    density-head output, pre-activation clamped at 10 to keep float32 finite.
    """
    dtype = params.dtype
    u = np.asarray(u, dtype=dtype)
    dirs = np.asarray(dirs, dtype=dtype)
    feats, enc_cache = encode_forward(u, params.tables, grid_cfg, keep_cache)
    dens_out, dens_cache = mlp_forward(feats, params.density_w, params.density_b)
    raw_sigma = dens_out[:, 0]
    sigma = np.exp(np.clip(raw_sigma, SIGMA_CLIP_LO, SIGMA_CLIP_HI))
    latent = dens_out[:, 1:]
    dir_feats = encode_directions(dirs, mlp_cfg.dir_encoding_degree)
    color_in = np.concatenate([latent, dir_feats], axis=1)
    col_out, col_cache = mlp_forward(color_in, params.color_w, params.color_b)
    rgb = 1.0 / (1.0 + np.exp(-col_out))
    cache = None
    if keep_cache:
        cache = (enc_cache, dens_cache, col_cache, raw_sigma, sigma, rgb)
    return sigma, rgb, cache


def field_backward(
    dsigma: np.ndarray,
    drgb: np.ndarray,
    cache,
    params: FieldParams,
    grid_cfg: HashGridConfig,
    mlp_cfg: MlpConfig,
) -> dict[str, np.ndarray]:
    """Parameter gradients for field_forward, keyed by block name."""
    enc_cache, dens_cache, col_cache, raw_sigma, sigma, rgb = cache
    dcol_out = drgb * rgb * (1.0 - rgb)
    cgw, cgb, dcolor_in = mlp_backward(dcol_out, col_cache, params.color_w)
    dlatent = dcolor_in[:, : mlp_cfg.latent_dim]

    ddens_out = np.empty((raw_sigma.shape[0], 1 + mlp_cfg.latent_dim), dtype=params.dtype)
    in_window = (raw_sigma > SIGMA_CLIP_LO) & (raw_sigma < SIGMA_CLIP_HI)
    ddens_out[:, 0] = dsigma * sigma * in_window
    ddens_out[:, 1:] = dlatent
    dgw, dgb, dfeats = mlp_backward(ddens_out, dens_cache, params.density_w)
    dtables = encode_backward(dfeats, enc_cache, grid_cfg, params.tables)

    grads: dict[str, np.ndarray] = {}
    for i, g in enumerate(dtables):
        grads[f"table{i}"] = g
    for prefix, group in (("density_w", dgw), ("density_b", dgb), ("color_w", cgw), ("color_b", cgb)):
        for i, g in enumerate(group):
            grads[f"{prefix}{i}"] = g
    return grads


class RadianceField(Protocol):
    """Anything the renderer can march: densities and colors per sample."""

    def eval_batch(
        self, positions: np.ndarray, directions: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """(sigma (N,), rgb (N, 3)) at world positions with unit view dirs."""
        ...


@dataclass
class NeuralField:
    """Trained field bound to its scene box; the renderer-facing wrapper."""

    params: FieldParams
    grid_cfg: HashGridConfig
    mlp_cfg: MlpConfig
    aabb: Aabb

    def eval_batch(self, positions, directions):
        u = normalize_positions(positions, self.aabb, self.params.dtype)
        sigma, rgb, _ = field_forward(
            u, directions, self.params, self.grid_cfg, self.mlp_cfg, keep_cache=False
        )
        return sigma, rgb


def field_eval(
    positions,
    directions,
    params: FieldParams,
    grid_cfg: HashGridConfig,
    mlp_cfg: MlpConfig,
    aabb: Aabb,
):
    """One-shot evaluation at world positions; raises DomainError outside the box."""
    u = normalize_positions(positions, aabb, params.dtype)
    sigma, rgb, _ = field_forward(u, directions, params, grid_cfg, mlp_cfg, keep_cache=False)
    return sigma, rgb


# Analytic fields: known closed-form scenes used as rendering oracles and
# benchmark content. They satisfy the same eval_batch protocol.


@dataclass(frozen=True)
class ConstantField:
    """Uniform medium: same density and color everywhere."""

    sigma: float = 1.0
    rgb: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def eval_batch(self, positions, directions):
        n = np.asarray(positions).shape[0]
        sig = np.full(n, self.sigma, dtype=np.float32)
        col = np.tile(np.asarray(self.rgb, dtype=np.float32), (n, 1))
        return sig, col


@dataclass(frozen=True)
class SphereField:
    """Solid colored ball in vacuum; density is sigma inside, 0 outside."""

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.5
    sigma: float = 50.0
    rgb: tuple[float, float, float] = (0.9, 0.25, 0.2)

    def eval_batch(self, positions, directions):
        p = np.asarray(positions, dtype=np.float32)
        d2 = np.sum((p - np.asarray(self.center, dtype=np.float32)) ** 2, axis=-1)
        inside = d2 <= self.radius * self.radius
        sig = np.where(inside, np.float32(self.sigma), np.float32(0.0))
        col = np.tile(np.asarray(self.rgb, dtype=np.float32), (p.shape[0], 1))
        return sig, col


_OCTANT_COLORS = np.array(
    [
        [0.9, 0.2, 0.2],
        [0.2, 0.9, 0.2],
        [0.2, 0.2, 0.9],
        [0.9, 0.9, 0.2],
        [0.9, 0.2, 0.9],
        [0.2, 0.9, 0.9],
        [0.85, 0.85, 0.85],
        [0.9, 0.5, 0.2],
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class ColoredBoxField:
    """Axis-aligned box whose octants (relative to center) differ in color."""

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    half_extent: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sigma: float = 10.0

    def eval_batch(self, positions, directions):
        p = np.asarray(positions, dtype=np.float32)
        rel = p - np.asarray(self.center, dtype=np.float32)
        inside = np.all(np.abs(rel) <= np.asarray(self.half_extent, dtype=np.float32), axis=-1)
        sig = np.where(inside, np.float32(self.sigma), np.float32(0.0))
        octant = (
            (rel[..., 0] >= 0).astype(np.int64)
            + 2 * (rel[..., 1] >= 0).astype(np.int64)
            + 4 * (rel[..., 2] >= 0).astype(np.int64)
        )
        col = _OCTANT_COLORS[octant]
        return sig, col.astype(np.float32)


def preset_scene(name: str):
    """Named analytic scenes: (field, scene box). Sides 2 / 4 / 16."""
    if name in ("small", "sphere"):
        return SphereField(radius=0.5, sigma=50.0), Aabb.centered_cube(2.0)
    if name == "medium":
        return (
            SphereField(center=(0.3, 0.0, -0.2), radius=1.0, sigma=30.0, rgb=(0.2, 0.6, 0.9)),
            Aabb.centered_cube(4.0),
        )
    if name == "large":
        return (
            ColoredBoxField(half_extent=(5.0, 3.0, 5.0), sigma=8.0),
            Aabb.centered_cube(16.0),
        )
    raise ValueError(f"unknown preset scene {name!r}")
