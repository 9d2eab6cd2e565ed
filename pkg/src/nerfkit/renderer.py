"""Volumetric ray marching: emission-absorption compositing, stereo, upscaling.

Rays are clipped to the scene box, sampled at the midpoints of n equal
sub-intervals, and composited front to back. Per-sample weights use the
difference form w_i = T_i - T_{i+1}, which telescopes so that the weights
plus the residual transmittance sum to exactly 1 in floating point. Rays
whose transmittance falls below the early-stop threshold are treated as
opaque and dropped from the march.

The optional scene transform is a similarity applied to the scene: rays are
pulled back into scene space by its inverse, while absorption distances stay
in world meters, so scaling a scene up makes it optically thicker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from PIL import Image as PilImage

from .field import RadianceField
from .geometry import (
    Aabb,
    Camera,
    Pose,
    Similarity,
    aabb_intersect_grid,
    pixel_ray_grid,
    vec3,
)
from .images import Image

UPSCALE_FACTORS = (1, 2, 4)
_EVAL_BLOCK = 32  # samples marched per field evaluation round


@dataclass(frozen=True)
class RenderSettings:
    """Everything about a render that is not the camera or the field."""

    width: int = 640
    height: int = 480
    samples_per_ray: int = 128
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    upscale: int = 1
    upscale_method: str = "bilinear"
    scene_transform: Similarity = dc_field(default_factory=Similarity.identity)
    aabb: Aabb = dc_field(default_factory=lambda: Aabb.centered_cube(2.0))
    early_stop_transmittance: float = 1e-4

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("render size must be positive")
        if self.samples_per_ray < 1:
            raise ValueError("need at least one sample per ray")
        if self.upscale not in UPSCALE_FACTORS:
            raise ValueError(f"upscale must be one of {UPSCALE_FACTORS}")
        if self.width % self.upscale or self.height % self.upscale:
            raise ValueError("width and height must be divisible by the upscale factor")
        if self.upscale_method not in ("bilinear", "lanczos"):
            raise ValueError(f"unknown upscale method {self.upscale_method!r}")
        bg = np.asarray(self.background, dtype=np.float32)
        if bg.shape != (3,) or bg.min() < 0 or bg.max() > 1:
            raise ValueError("background must be three channels in [0, 1]")
        if not (0.0 <= self.early_stop_transmittance < 1.0):
            raise ValueError("early_stop_transmittance must be in [0, 1)")

    @property
    def internal_size(self) -> tuple[int, int]:
        return self.width // self.upscale, self.height // self.upscale


@dataclass(frozen=True)
class StereoRig:
    """Head pose plus interpupillary distance; eyes sit at +-ipd/2 on head X."""

    head_pose: Pose
    ipd: float = 0.063
    fov_y: float = math.radians(60.0)
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (0.0 <= self.ipd <= 0.1):
            raise ValueError(f"ipd {self.ipd} outside the plausible [0, 0.1] m range")

    def eye_offset(self, eye: str) -> np.ndarray:
        if eye == "left":
            return vec3(-self.ipd / 2.0, 0.0, 0.0)
        if eye == "right":
            return vec3(self.ipd / 2.0, 0.0, 0.0)
        raise ValueError(f"eye must be 'left' or 'right', got {eye!r}")


def composite_ray(sigmas, rgbs, deltas, background=(0.0, 0.0, 0.0)):
    """Front-to-back compositing of one ray, the readable reference form.

    Returns (color (3,), weights (n,), residual transmittance). weights[i]
    is T_i - T_{i+1} with alpha_i = 1 - exp(-sigma_i * delta_i); the
    background enters with the residual transmittance.
    """
    sigmas = np.asarray(sigmas)
    rgbs = np.asarray(rgbs)
    deltas = np.asarray(deltas)
    bg = np.asarray(background, dtype=rgbs.dtype)
    trans = rgbs.dtype.type(1.0)
    color = np.zeros(3, dtype=rgbs.dtype)
    weights = np.zeros(len(sigmas), dtype=rgbs.dtype)
    for i in range(len(sigmas)):
        alpha = 1.0 - np.exp(-sigmas[i] * deltas[i])
        t_next = trans * (1.0 - alpha)
        weights[i] = trans - t_next
        color += weights[i] * rgbs[i]
        trans = t_next
    color += trans * bg
    return color, weights, float(trans)


def composite_batch(sigmas, rgbs, deltas, background=(0.0, 0.0, 0.0), keep_cache=False):
    """Vectorized compositing of (R, n) sample batches.

    Returns (colors (R, 3), weights (R, n), residual transmittance (R,),
    cache). The cache feeds composite_backward.
    """
    sigmas = np.asarray(sigmas)
    rgbs = np.asarray(rgbs)
    deltas = np.asarray(deltas)
    dtype = rgbs.dtype
    bg = np.asarray(background, dtype=dtype)
    r, n = sigmas.shape
    alphas = 1.0 - np.exp(-sigmas * deltas)
    trans = np.empty((r, n + 1), dtype=dtype)
    trans[:, 0] = 1.0
    for i in range(n):
        trans[:, i + 1] = trans[:, i] * (1.0 - alphas[:, i])
    weights = trans[:, :-1] - trans[:, 1:]
    colors = np.einsum("rn,rnc->rc", weights, rgbs) + trans[:, -1:] * bg
    cache = (alphas, trans, rgbs, deltas, bg) if keep_cache else None
    return colors.astype(dtype, copy=False), weights, trans[:, -1], cache


def composite_backward(dcolors, cache):
    """Gradients of composite_batch outputs w.r.t. sigmas and rgbs.

    Uses the reverse recursion R_i = alpha_i c_i + (1 - alpha_i) R_{i+1},
    giving dC/dalpha_i = T_i (c_i - R_{i+1}) without dividing by
    transmittance, so fully absorbed rays stay finite.
    """
    alphas, trans, rgbs, deltas, bg = cache
    r, n = alphas.shape
    dtype = rgbs.dtype
    dcolors = np.asarray(dcolors, dtype=dtype)

    suffix = np.empty((r, n + 1, 3), dtype=dtype)
    suffix[:, n] = bg
    for i in range(n - 1, -1, -1):
        a = alphas[:, i : i + 1]
        suffix[:, i] = a * rgbs[:, i] + (1.0 - a) * suffix[:, i + 1]

    weights = trans[:, :-1] - trans[:, 1:]
    drgbs = weights[:, :, None] * dcolors[:, None, :]
    dalpha = np.einsum(
        "rc,rnc->rn", dcolors, trans[:, :-1, None] * (rgbs - suffix[:, 1:])
    )
    dsigmas = dalpha * deltas * (1.0 - alphas)
    return dsigmas.astype(dtype, copy=False), drgbs.astype(dtype, copy=False)


def _march_chunk(field, origin_s, dirs_s, tn, tf, settings, scale):
    """March one chunk of rays already clipped to the scene box.

    origin_s/dirs_s are scene-space rays (R, 3); tn/tf per-ray scene-space
    clip range with tn < tf. The field sees scene-space positions and view
    directions. Returns (colors (R, 3), residual trans (R,)).
    """
    n = settings.samples_per_ray
    r = origin_s.shape[0]
    dtype = np.float32
    colors = np.zeros((r, 3), dtype=dtype)
    trans = np.ones(r, dtype=dtype)
    delta_s = (tf - tn) / dtype(n)
    delta_w = delta_s * dtype(scale)  # absorption uses world meters

    alive = np.arange(r)
    threshold = dtype(settings.early_stop_transmittance)
    for start in range(0, n, _EVAL_BLOCK):
        stop = min(start + _EVAL_BLOCK, n)
        idx = np.arange(start, stop, dtype=dtype) + dtype(0.5)
        ts = tn[alive, None] + idx[None, :] * delta_s[alive, None]  # (A, b)
        pts = origin_s[alive, None, :] + ts[:, :, None] * dirs_s[alive, None, :]
        b = stop - start
        flat_dirs = np.repeat(dirs_s[alive], b, axis=0)
        sigma, rgb = field.eval_batch(pts.reshape(-1, 3), flat_dirs)
        sigma = sigma.reshape(-1, b)
        rgb = rgb.reshape(-1, b, 3)

        t_alive = trans[alive]
        alpha = 1.0 - np.exp(-sigma * delta_w[alive, None])
        acc = colors[alive]
        for k in range(b):
            t_next = t_alive * (1.0 - alpha[:, k])
            acc += (t_alive - t_next)[:, None] * rgb[:, k]
            t_alive = t_next
        colors[alive] = acc
        trans[alive] = t_alive

        keep = t_alive >= threshold
        if not keep.all():
            alive = alive[keep]
            if alive.size == 0:
                break
    return colors, trans


def render_frame(field: RadianceField, camera: Camera, settings: RenderSettings,
                 eye_offset=None, chunk_rays: int = 65536) -> Image:
    """Render one frame. Pose, fov and clip planes come from the camera; the
    pixel dimensions come from settings (the camera's own size is ignored so
    services can switch resolution without rebuilding cameras). chunk_rays
    bounds peak memory and does not affect the output.
    """
    wi, hi = settings.internal_size
    cam = replace(camera, width=wi, height=hi)
    origin_w, dirs_w = pixel_ray_grid(cam, eye_offset=eye_offset)
    dirs_flat = dirs_w.reshape(-1, 3)

    inv = settings.scene_transform.inverse()
    scale = settings.scene_transform.scale
    origin_s = inv.apply_points(origin_w)
    dirs_s = inv.apply_directions(dirs_flat)

    tn, tf, hit = aabb_intersect_grid(origin_s, dirs_s, settings.aabb)
    # Clip planes are world distances; scene-space t scales by 1/scale.
    tn = np.maximum(tn, np.float32(camera.near / scale))
    tf = np.minimum(tf, np.float32(camera.far / scale))
    hit &= tf > tn

    total = wi * hi
    out = np.empty((total, 3), dtype=np.float32)
    bg = np.asarray(settings.background, dtype=np.float32)
    out[:] = bg

    hit_idx = np.flatnonzero(hit)
    for start in range(0, hit_idx.size, max(1, chunk_rays)):
        sel = hit_idx[start : start + chunk_rays]
        colors, trans = _march_chunk(
            field,
            np.broadcast_to(origin_s, dirs_s.shape)[sel],
            dirs_s[sel],
            tn[sel],
            tf[sel],
            settings,
            scale,
        )
        out[sel] = colors + trans[:, None] * bg

    image = Image(out.reshape(hi, wi, 3))
    if settings.upscale != 1:
        image = upscale(image, settings.upscale, settings.upscale_method)
    return image


def render_stereo(field: RadianceField, rig: StereoRig, settings: RenderSettings):
    """Render (left, right) eye images from the shared head pose."""
    cam = Camera(
        rig.head_pose, rig.fov_y, settings.width, settings.height, rig.near, rig.far
    )
    left = render_frame(field, cam, settings, eye_offset=rig.eye_offset("left"))
    right = render_frame(field, cam, settings, eye_offset=rig.eye_offset("right"))
    return left, right


def _bilinear_axis_indices(n_out: int, n_in: int, dtype=np.float64):
    """Align-corners source coordinates: 0 and n_in-1 map to the ends."""
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, np.int64), np.zeros(n_out, np.int64), np.zeros(n_out, dtype)
    pos = np.arange(n_out, dtype=dtype) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(pos).astype(np.int64)
    np.clip(i0, 0, n_in - 2, out=i0)
    frac = pos - i0
    return i0, i0 + 1, frac


def upscale(image: Image, factor: int, method: str = "bilinear") -> Image:
    """Deterministic upscaling by an integer factor.

    bilinear uses align-corners sampling: output corners coincide with input
    corners, so a 2-pixel row [0, 1] upscaled 2x is [0, 1/3, 2/3, 1].
    lanczos delegates to Pillow's 3-lobe filter.
    """
    if factor == 1:
        return image
    if factor not in UPSCALE_FACTORS:
        raise ValueError(f"upscale factor must be one of {UPSCALE_FACTORS}")
    h, w = image.height, image.width
    if method == "lanczos":
        arr = np.asarray(
            PilImage.fromarray(image.to_uint8(), mode="RGB").resize(
                (w * factor, h * factor), PilImage.LANCZOS
            ),
            dtype=np.float32,
        )
        return Image(arr / 255.0)
    if method != "bilinear":
        raise ValueError(f"unknown upscale method {method!r}")
    data = image.data.astype(np.float64)
    x0, x1, fx = _bilinear_axis_indices(w * factor, w)
    y0, y1, fy = _bilinear_axis_indices(h * factor, h)
    rows = data[y0] * (1 - fy)[:, None, None] + data[y1] * fy[:, None, None]
    out = rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return Image(out.astype(np.float32))
