"""3D math shared by every subsystem: vectors, quaternions, poses, rays, boxes.

Conventions, binding across the package:

* right-handed world, +Y up, distances in meters
* a camera looks along its local -Z axis; +X is camera right, +Y camera up
* stored transforms are camera-to-world; the view matrix is their inverse
* pixel (0, 0) is the top-left corner; rays go through pixel centers,
  i.e. through (px + 0.5, py + 0.5)

Public math is float32 unless a caller passes wider arrays explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

_UNIT_TOL = 1e-5


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=DTYPE)


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=DTYPE)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(v, dtype=np.float64) ** 2)))


def normalize(v: np.ndarray) -> np.ndarray:
    a = np.asarray(v, dtype=DTYPE)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return (a / n).astype(DTYPE)


# Quaternions are [x, y, z, w] arrays; w is the scalar part.


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0], dtype=DTYPE)


def as_quat(q) -> np.ndarray:
    a = np.asarray(q, dtype=DTYPE)
    if a.shape != (4,):
        raise ValueError(f"expected a quaternion [x, y, z, w], got shape {a.shape}")
    return a


def quat_normalize(q) -> np.ndarray:
    a = as_quat(q)
    n = float(np.linalg.norm(a.astype(np.float64)))
    if n == 0:
        raise ValueError("cannot normalize a zero quaternion")
    return (a / n).astype(DTYPE)


def quat_mul(a, b) -> np.ndarray:
    ax, ay, az, aw = np.asarray(a, dtype=np.float64)
    bx, by, bz, bw = np.asarray(b, dtype=np.float64)
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        dtype=DTYPE,
    )


def quat_conjugate(q) -> np.ndarray:
    x, y, z, w = as_quat(q)
    return np.array([-x, -y, -z, w], dtype=DTYPE)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    a = normalize(as_vec3(axis)).astype(np.float64)
    half = 0.5 * float(angle)
    s = math.sin(half)
    return np.array([a[0] * s, a[1] * s, a[2] * s, math.cos(half)], dtype=DTYPE)


def quat_to_mat3(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ],
        dtype=DTYPE,
    )


def quat_from_mat3(m) -> np.ndarray:
    """Convert a rotation matrix to a unit quaternion (Shepperd's method)."""
    a = np.asarray(m, dtype=np.float64)
    t = a[0, 0] + a[1, 1] + a[2, 2]
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (a[2, 1] - a[1, 2]) / s
        y = (a[0, 2] - a[2, 0]) / s
        z = (a[1, 0] - a[0, 1]) / s
    elif a[0, 0] >= a[1, 1] and a[0, 0] >= a[2, 2]:
        s = math.sqrt(1.0 + a[0, 0] - a[1, 1] - a[2, 2]) * 2
        x = 0.25 * s
        w = (a[2, 1] - a[1, 2]) / s
        y = (a[0, 1] + a[1, 0]) / s
        z = (a[0, 2] + a[2, 0]) / s
    elif a[1, 1] >= a[2, 2]:
        s = math.sqrt(1.0 + a[1, 1] - a[0, 0] - a[2, 2]) * 2
        y = 0.25 * s
        w = (a[0, 2] - a[2, 0]) / s
        x = (a[0, 1] + a[1, 0]) / s
        z = (a[1, 2] + a[2, 1]) / s
    else:
        s = math.sqrt(1.0 + a[2, 2] - a[0, 0] - a[1, 1]) * 2
        z = 0.25 * s
        w = (a[1, 0] - a[0, 1]) / s
        x = (a[0, 2] + a[2, 0]) / s
        y = (a[1, 2] + a[2, 1]) / s
    return quat_normalize(np.array([x, y, z, w], dtype=DTYPE))


def quat_rotate(q, v) -> np.ndarray:
    """Rotate one vector or an (..., 3) array of vectors by quaternion q."""
    m = quat_to_mat3(q)
    a = np.asarray(v, dtype=DTYPE)
    return (a @ m.T.astype(a.dtype)).astype(a.dtype)


@dataclass(frozen=True)
class Pose:
    """Rigid placement: world position plus unit orientation quaternion."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        q = as_quat(self.orientation)
        n = float(np.linalg.norm(q.astype(np.float64)))
        if abs(n - 1.0) > 1e-3:
            raise ValueError(f"orientation quaternion norm {n:.6f} is not 1")
        object.__setattr__(self, "orientation", (q / n).astype(DTYPE))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(vec3(0, 0, 0), quat_identity())

    @property
    def right(self) -> np.ndarray:
        return quat_rotate(self.orientation, vec3(1, 0, 0))

    @property
    def up(self) -> np.ndarray:
        return quat_rotate(self.orientation, vec3(0, 1, 0))

    @property
    def forward(self) -> np.ndarray:
        return quat_rotate(self.orientation, vec3(0, 0, -1))


def camera_to_world(pose: Pose) -> np.ndarray:
    """4x4 matrix mapping camera-space points into the world."""
    m = np.eye(4, dtype=DTYPE)
    m[:3, :3] = quat_to_mat3(pose.orientation)
    m[:3, 3] = pose.position
    return m


def view_matrix(pose: Pose) -> np.ndarray:
    """4x4 world-to-camera matrix, the inverse of camera_to_world."""
    r = quat_to_mat3(pose.orientation)
    m = np.eye(4, dtype=DTYPE)
    m[:3, :3] = r.T
    m[:3, 3] = -(r.T @ pose.position)
    return m


def pose_look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Pose at eye looking toward target, -Z forward, roll fixed by up."""
    eye = as_vec3(eye)
    fwd = normalize(as_vec3(target) - eye)
    upv = as_vec3(up)
    right = np.cross(fwd, upv)
    if norm(right) < 1e-8:
        raise ValueError("view direction is parallel to the up vector")
    right = normalize(right)
    true_up = np.cross(right, fwd)
    m = np.stack([right, true_up, -fwd], axis=1)
    return Pose(eye, quat_from_mat3(m))


def orbit_pose(center, radius: float, azimuth: float, elevation: float) -> Pose:
    """Pose on a sphere around center, looking at center.

    azimuth 0 sits on +Z rotating toward +X; elevation raises toward +Y.
    """
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    center = as_vec3(center)
    ce = math.cos(elevation)
    eye = center + np.array(
        [
            radius * ce * math.sin(azimuth),
            radius * math.sin(elevation),
            radius * ce * math.cos(azimuth),
        ],
        dtype=DTYPE,
    )
    return pose_look_at(eye, center)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: pose plus vertical field of view and pixel size."""

    pose: Pose
    fov_y: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def aspect(self) -> float:
        return self.width / self.height


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vec3(self.origin))
        d = as_vec3(self.direction)
        n = float(np.linalg.norm(d.astype(np.float64)))
        if abs(n - 1.0) > 1e-3:
            raise ValueError(f"ray direction norm {n:.6f} is not 1")
        object.__setattr__(self, "direction", (d / n).astype(DTYPE))

    def at(self, t: float) -> np.ndarray:
        return (self.origin + DTYPE(t) * self.direction).astype(DTYPE)


def _camera_dir_terms(camera: Camera) -> tuple[float, float]:
    tan_half = math.tan(0.5 * camera.fov_y)
    return tan_half * camera.aspect, tan_half


def ray_for_pixel(camera: Camera, px: float, py: float, eye_offset=None) -> Ray:
    """World-space ray through the center of pixel (px, py).

    eye_offset is expressed in the camera frame (meters); it shifts the ray
    origin without re-aiming the ray, which is how per-eye rays are built.
    """
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(
            f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image"
        )
    su, sv = _camera_dir_terms(camera)
    u = (2.0 * (px + 0.5) / camera.width - 1.0) * su
    v = (1.0 - 2.0 * (py + 0.5) / camera.height) * sv
    d_cam = np.array([u, v, -1.0], dtype=DTYPE)
    d_world = normalize(quat_rotate(camera.pose.orientation, d_cam))
    origin = camera.pose.position
    if eye_offset is not None:
        origin = origin + quat_rotate(camera.pose.orientation, as_vec3(eye_offset))
    return Ray(origin, d_world)


def pixel_ray_grid(
    camera: Camera, eye_offset=None
) -> tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel center: shared origin (3,) and directions (H, W, 3)."""
    w, h = camera.width, camera.height
    su, sv = _camera_dir_terms(camera)
    us = ((2.0 * (np.arange(w, dtype=DTYPE) + 0.5) / w - 1.0) * su).astype(DTYPE)
    vs = ((1.0 - 2.0 * (np.arange(h, dtype=DTYPE) + 0.5) / h) * sv).astype(DTYPE)
    d_cam = np.empty((h, w, 3), dtype=DTYPE)
    d_cam[..., 0] = us[None, :]
    d_cam[..., 1] = vs[:, None]
    d_cam[..., 2] = -1.0
    rot = quat_to_mat3(camera.pose.orientation)
    d_world = d_cam.reshape(-1, 3) @ rot.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = camera.pose.position
    if eye_offset is not None:
        origin = origin + quat_rotate(camera.pose.orientation, as_vec3(eye_offset))
    return origin.astype(DTYPE), d_world.reshape(h, w, 3).astype(DTYPE)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min strictly below max on every axis."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", as_vec3(self.min))
        object.__setattr__(self, "max", as_vec3(self.max))
        if not np.all(self.min < self.max):
            raise ValueError(f"degenerate box: min {self.min} max {self.max}")

    @classmethod
    def centered_cube(cls, side: float) -> "Aabb":
        h = float(side) / 2.0
        return cls(vec3(-h, -h, -h), vec3(h, h, h))

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return ((self.min + self.max) / 2).astype(DTYPE)

    @property
    def scale(self) -> float:
        """Longest side, the single number quoted for cubic scene boxes."""
        return float(np.max(self.size))

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)


def aabb_intersect_grid(origin, directions, aabb: Aabb):
    """Slab intersection for many rays sharing nothing but the box.

    origin broadcasts against directions (..., 3). Returns (t_near, t_far,
    hit) where t_near is clamped to 0 for origins inside the box and entries
    of t_near/t_far are meaningful only where hit is True.
    """
    d = np.asarray(directions, dtype=DTYPE)
    o = np.broadcast_to(np.asarray(origin, dtype=DTYPE), d.shape)
    tn = np.full(d.shape[:-1], -np.inf, dtype=DTYPE)
    tf = np.full(d.shape[:-1], np.inf, dtype=DTYPE)
    for axis in range(3):
        da = d[..., axis]
        oa = o[..., axis]
        par = da == 0
        safe = np.where(par, DTYPE(1), da)
        lo = (aabb.min[axis] - oa) / safe
        hi = (aabb.max[axis] - oa) / safe
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        inside = (oa >= aabb.min[axis]) & (oa <= aabb.max[axis])
        lo = np.where(par, np.where(inside, DTYPE(-np.inf), DTYPE(np.inf)), lo)
        hi = np.where(par, np.where(inside, DTYPE(np.inf), DTYPE(-np.inf)), hi)
        tn = np.maximum(tn, lo)
        tf = np.minimum(tf, hi)
    tn = np.maximum(tn, DTYPE(0))
    hit = tf >= tn
    return tn, tf, hit


def aabb_intersect(ray: Ray, aabb: Aabb):
    """(t_near, t_far) of the ray's overlap with the box, or None if it misses.

    t_near is clamped to 0 when the origin is inside the box.
    """
    tn, tf, hit = aabb_intersect_grid(ray.origin[None, :], ray.direction[None, :], aabb)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


@dataclass(frozen=True)
class Similarity:
    """Uniform-scale rigid transform: x -> scale * R(rotation) x + translation.

    Used both as the renderer's scene transform and as the grab/turn/resize
    manipulation state; composing and inverting stay inside the type.
    """

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: vec3(0, 0, 0))

    def __post_init__(self):
        if not (self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @classmethod
    def identity(cls) -> "Similarity":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "Similarity":
        return cls(translation=as_vec3(t))

    @classmethod
    def from_rotation(cls, q) -> "Similarity":
        return cls(rotation=quat_normalize(q))

    @classmethod
    def from_scale(cls, s: float) -> "Similarity":
        return cls(scale=s)

    def apply_points(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=DTYPE)
        return (quat_rotate(self.rotation, p) * DTYPE(self.scale) + self.translation).astype(
            DTYPE
        )

    def apply_directions(self, dirs) -> np.ndarray:
        """Rotate unit directions; scale and translation do not apply."""
        return quat_rotate(self.rotation, np.asarray(dirs, dtype=DTYPE))

    def inverse(self) -> "Similarity":
        inv_q = quat_conjugate(self.rotation)
        inv_s = 1.0 / self.scale
        inv_t = -quat_rotate(inv_q, self.translation) * DTYPE(inv_s)
        return Similarity(inv_s, inv_q, inv_t)

    def compose(self, other: "Similarity") -> "Similarity":
        """Transform equal to applying other first, then self."""
        q = quat_mul(self.rotation, other.rotation)
        s = self.scale * other.scale
        t = self.apply_points(other.translation)
        return Similarity(s, q, t)
