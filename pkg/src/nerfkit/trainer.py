"""Field training: posed-image datasets, the ray-batch loss, and Adam.

Datasets follow the transforms-manifest convention: a transforms.json with
camera_angle_x (horizontal fov, radians), an aabb_scale giving the side of
the origin-centered scene cube, and per-frame camera-to-world matrices next
to the image files.

Training is fully seeded. One generator drives pixel sampling and the
stratified jitter in a fixed call order, and every numeric kernel is
single-threaded numpy, so a rerun with the same seed reproduces the loss
history bit for bit. The optimized loss is the sum of squared errors over
the batch (so duplicating a batch exactly doubles the gradient); histories
report it as MSE per channel for readability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import (
    FieldParams,
    HashGridConfig,
    MlpConfig,
    NeuralField,
    field_backward,
    field_forward,
    init_field_params,
    normalize_positions,
    preset_scene,
)
from .geometry import (
    Aabb,
    Camera,
    Pose,
    aabb_intersect_grid,
    camera_to_world,
    orbit_pose,
    quat_from_mat3,
    quat_to_mat3,
)
from .images import Image, load_png, save_png
from .renderer import RenderSettings, composite_backward, composite_batch, render_frame


class DatasetError(ValueError):
    """The manifest or its images violate the dataset convention."""


class TransformError(DatasetError):
    """A frame's transform is not a proper rigid camera-to-world matrix."""


class DimensionMismatchError(DatasetError):
    """Images in one dataset disagree in size."""


class TrainDivergedError(RuntimeError):
    """Loss or gradients became non-finite; carries where it happened."""

    def __init__(self, step: int, block: str):
        super().__init__(f"training diverged at step {step} (first bad block: {block})")
        self.step = step
        self.block = block


@dataclass
class Dataset:
    """Posed images sharing one pinhole intrinsic and one scene box."""

    images: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    poses: list[Pose]  # camera-to-world
    fov_y: float
    aabb: Aabb

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DimensionMismatchError(
                f"expected (F, H, W, 3) images, got {self.images.shape}"
            )
        if len(self.poses) != self.images.shape[0]:
            raise DatasetError("one pose per image required")

    @property
    def num_views(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


def fov_y_from_camera_angle_x(camera_angle_x: float, width: int, height: int) -> float:
    """Vertical fov from the manifest's horizontal fov for a given aspect."""
    return 2.0 * math.atan(math.tan(camera_angle_x / 2.0) * height / width)


def camera_angle_x_from_fov_y(fov_y: float, width: int, height: int) -> float:
    return 2.0 * math.atan(math.tan(fov_y / 2.0) * width / height)


def _pose_from_matrix(matrix, index: int) -> Pose:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise TransformError(f"frame {index}: transform_matrix must be 4x4, got {m.shape}")
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-5):
        raise TransformError(f"frame {index}: last row must be [0, 0, 0, 1]")
    r = m[:3, :3]
    if not np.isfinite(r).all():
        raise TransformError(f"frame {index}: non-finite rotation")
    gram = r.T @ r
    if not np.allclose(gram, np.eye(3), atol=1e-3):
        raise TransformError(f"frame {index}: rotation is not orthonormal within 1e-3")
    if np.linalg.det(r) < 0:
        raise TransformError(f"frame {index}: rotation is reflected (det < 0)")
    # Accept small drift by renormalizing through the quaternion.
    return Pose(m[:3, 3], quat_from_mat3(r))


def load_dataset(manifest_path) -> Dataset:
    """Read a transforms.json manifest and its PNG images."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: not valid JSON ({e})") from e
    for key in ("camera_angle_x", "frames"):
        if key not in manifest:
            raise DatasetError(f"{manifest_path}: missing {key!r}")
    if not manifest["frames"]:
        raise DatasetError(f"{manifest_path}: no frames")

    aabb_scale = manifest.get("aabb_scale", 1)
    if (
        not isinstance(aabb_scale, int)
        or aabb_scale < 1
        or aabb_scale & (aabb_scale - 1)
    ):
        raise DatasetError(f"aabb_scale must be a positive power of two, got {aabb_scale}")

    root = manifest_path.parent
    images = []
    poses = []
    for i, frame in enumerate(manifest["frames"]):
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise DatasetError(f"frame {i}: needs file_path and transform_matrix")
        path = root / frame["file_path"]
        if not path.suffix:
            path = path.with_suffix(".png")
        if not path.is_file():
            raise FileNotFoundError(f"frame {i}: image not found: {path}")
        img = load_png(path)
        if images and img.data.shape != images[0].shape:
            raise DimensionMismatchError(
                f"frame {i}: image is {img.data.shape[1]}x{img.data.shape[0]}, "
                f"expected {images[0].shape[1]}x{images[0].shape[0]}"
            )
        images.append(img.data)
        poses.append(_pose_from_matrix(frame["transform_matrix"], i))

    stack = np.stack(images)
    fov_y = fov_y_from_camera_angle_x(
        float(manifest["camera_angle_x"]), stack.shape[2], stack.shape[1]
    )
    return Dataset(stack, poses, fov_y, Aabb.centered_cube(float(aabb_scale)))


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write PNG images plus transforms.json; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, pose in enumerate(dataset.poses):
        name = f"frame_{i:04d}.png"
        save_png(Image(dataset.images[i]), out_dir / name)
        frames.append(
            {
                "file_path": name,
                "transform_matrix": camera_to_world(pose).astype(float).tolist(),
            }
        )
    manifest = {
        "camera_angle_x": camera_angle_x_from_fov_y(
            dataset.fov_y, dataset.width, dataset.height
        ),
        "aabb_scale": int(round(dataset.aabb.scale)),
        "frames": frames,
    }
    path = out_dir / "transforms.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def synthetic_sphere_dataset(
    num_views: int = 20,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
    samples_per_ray: int = 128,
) -> Dataset:
    """Orbit renders of the analytic sphere preset, for training smoke tests."""
    scene_field, aabb = preset_scene("small")
    rng = np.random.default_rng(seed)
    fov_y = math.radians(50.0)
    poses = []
    renders = []
    settings = RenderSettings(
        width=width, height=height, samples_per_ray=samples_per_ray, aabb=aabb
    )
    for i in range(num_views):
        azimuth = 2.0 * math.pi * i / num_views
        elevation = float(rng.uniform(-0.2, 0.55))
        radius = float(rng.uniform(2.0, 2.4))
        pose = orbit_pose(aabb.center, radius, azimuth, elevation)
        poses.append(pose)
        cam = Camera(pose, fov_y, width, height)
        renders.append(render_frame(scene_field, cam, settings).data)
    return Dataset(np.stack(renders), poses, fov_y, aabb)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; the seed has no default on purpose."""

    seed: int
    batch_rays: int = 4096
    steps: int = 2000
    samples_per_ray: int = 64
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.batch_rays < 1 or self.steps < 0 or self.samples_per_ray < 1:
            raise ValueError("batch_rays, steps and samples_per_ray must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.lr_tables <= 0 or self.lr_mlp <= 0 or self.eps <= 0:
            raise ValueError("learning rates and eps must be positive")


class AdamState:
    """Adaptive-moment optimizer over named parameter blocks."""

    def __init__(self, params: FieldParams, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.blocks()}
        self.v = {name: np.zeros_like(a) for name, a in params.blocks()}

    def step(self, params: FieldParams, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        b1 = params.dtype.type(cfg.beta1)
        b2 = params.dtype.type(cfg.beta2)
        c1 = params.dtype.type(1.0 - cfg.beta1**self.t)
        c2 = params.dtype.type(1.0 - cfg.beta2**self.t)
        for name, p in params.blocks():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            lr = cfg.lr_tables if name.startswith("table") else cfg.lr_mlp
            p -= params.dtype.type(lr) * (m / c1) / (np.sqrt(v / c2) + params.dtype.type(cfg.eps))


def ray_batch_gradients(
    params: FieldParams,
    grid_cfg: HashGridConfig,
    mlp_cfg: MlpConfig,
    aabb: Aabb,
    origins: np.ndarray,
    directions: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    jitter: np.ndarray,
    targets: np.ndarray,
    background=(0.0, 0.0, 0.0),
):
    """Sum-of-squared-error loss and its parameter gradients for one batch.

    jitter (B, n) in [0, 1) places one sample inside each of the n equal
    sub-intervals of [t_near, t_far] per ray. Returns (sq_err_sum, grads).
    """
    dtype = params.dtype
    b, n = jitter.shape
    delta = ((t_far - t_near) / dtype.type(n)).astype(dtype)
    offsets = np.arange(n, dtype=dtype)[None, :] + jitter.astype(dtype)
    ts = t_near[:, None].astype(dtype) + offsets * delta[:, None]
    pts = origins[:, None, :].astype(dtype) + ts[:, :, None] * directions[
        :, None, :
    ].astype(dtype)
    u = normalize_positions(pts.reshape(-1, 3), aabb, dtype)
    dirs_flat = np.repeat(directions.astype(dtype), n, axis=0)

    sigma, rgb, cache = field_forward(u, dirs_flat, params, grid_cfg, mlp_cfg)
    sigmas = sigma.reshape(b, n)
    rgbs = rgb.reshape(b, n, 3)
    deltas = np.broadcast_to(delta[:, None], (b, n))
    colors, _, _, comp_cache = composite_batch(
        sigmas, rgbs, deltas, background, keep_cache=True
    )
    diff = colors - targets.astype(dtype)
    sq_err_sum = float(np.sum(np.square(diff), dtype=np.float64))

    dsig, drgb = composite_backward(2.0 * diff, comp_cache)
    grads = field_backward(
        dsig.reshape(-1), drgb.reshape(-1, 3), cache, params, grid_cfg, mlp_cfg
    )
    return sq_err_sum, grads


@dataclass
class TrainResult:
    params: FieldParams
    grid_cfg: HashGridConfig
    mlp_cfg: MlpConfig
    aabb: Aabb
    history: list[float]  # per-step MSE over the sampled batch

    @property
    def field(self) -> NeuralField:
        return NeuralField(self.params, self.grid_cfg, self.mlp_cfg, self.aabb)


def _first_bad_block(grads: dict[str, np.ndarray], params: FieldParams) -> str:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            return name
    for name, p in params.blocks():
        if not np.isfinite(p).all():
            return name
    return "loss"


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    grid_cfg: HashGridConfig | None = None,
    mlp_cfg: MlpConfig | None = None,
    progress=None,
) -> TrainResult:
    """Optimize a fresh field against the dataset; fully determined by cfg.seed.

    progress, if given, is called as progress(step, mse) once per step.
    """
    grid_cfg = grid_cfg or HashGridConfig()
    mlp_cfg = mlp_cfg or MlpConfig()
    params = init_field_params(grid_cfg, mlp_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(params, cfg)

    f, h, w = dataset.num_views, dataset.height, dataset.width
    rot = np.stack([quat_to_mat3(p.orientation) for p in dataset.poses]).astype(np.float32)
    cam_pos = np.stack([p.position for p in dataset.poses]).astype(np.float32)
    tan_half = math.tan(dataset.fov_y / 2.0)
    aspect = w / h

    history: list[float] = []
    for step in range(cfg.steps):
        fi = rng.integers(0, f, size=cfg.batch_rays)
        px = rng.integers(0, w, size=cfg.batch_rays)
        py = rng.integers(0, h, size=cfg.batch_rays)
        jitter = rng.random((cfg.batch_rays, cfg.samples_per_ray), dtype=np.float32)

        u = ((2.0 * (px + 0.5) / w - 1.0) * tan_half * aspect).astype(np.float32)
        v = ((1.0 - 2.0 * (py + 0.5) / h) * tan_half).astype(np.float32)
        d_cam = np.stack([u, v, np.full_like(u, -1.0)], axis=1)
        d_world = np.einsum("bij,bj->bi", rot[fi], d_cam)
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = cam_pos[fi]
        targets = dataset.images[fi, py, px]

        tn, tf, hit = aabb_intersect_grid(origins, d_world, dataset.aabb)
        hit &= tf > tn
        if not hit.any():
            history.append(0.0)
            continue
        sq_sum, grads = ray_batch_gradients(
            params,
            grid_cfg,
            mlp_cfg,
            dataset.aabb,
            origins[hit],
            d_world[hit],
            tn[hit],
            tf[hit],
            jitter[hit],
            targets[hit],
            cfg.background,
        )
        mse = sq_sum / (3.0 * int(hit.sum()))
        if not math.isfinite(mse) or any(
            not np.isfinite(g).all() for g in grads.values()
        ):
            raise TrainDivergedError(step, _first_bad_block(grads, params))
        adam.step(params, grads)
        history.append(mse)
        if progress is not None:
            progress(step, mse)

    return TrainResult(params, grid_cfg, mlp_cfg, dataset.aabb, history)


def psnr(mse: float) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    if mse <= 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def evaluate_psnr(
    field_obj, dataset: Dataset, samples_per_ray: int = 128, background=(0.0, 0.0, 0.0)
) -> float:
    """PSNR of deterministic re-renders against the dataset, pooled over all pixels."""
    settings = RenderSettings(
        width=dataset.width,
        height=dataset.height,
        samples_per_ray=samples_per_ray,
        background=background,
        aabb=dataset.aabb,
    )
    total_sq = 0.0
    for i, pose in enumerate(dataset.poses):
        cam = Camera(pose, dataset.fov_y, dataset.width, dataset.height)
        img = render_frame(field_obj, cam, settings)
        total_sq += float(
            np.sum(np.square(img.data - dataset.images[i]), dtype=np.float64)
        )
    mse = total_sq / dataset.images.size
    return psnr(mse)
