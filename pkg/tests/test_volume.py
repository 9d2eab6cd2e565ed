import json

import numpy as np
import pytest

from nerfkit.field import ConstantField, SphereField
from nerfkit.geometry import Aabb, Camera, Similarity, pose_look_at, vec3
from nerfkit.renderer import RenderSettings, render_frame
from nerfkit.volume import (
    GridField,
    MetadataMismatchError,
    MissingSliceError,
    TransferFunction,
    VolumeBudgetError,
    VolumeError,
    VolumeGrid,
    export_volume,
    raycast_grid,
    read_slices,
    write_slices,
)

BOX = Aabb.centered_cube(2.0)


def sphere_grid(n=16):
    field = SphereField(center=vec3(0, 0, 0), radius=0.6, sigma=25.0, rgb=(0.9, 0.3, 0.1))
    return export_volume(field, BOX, n)


def test_export_constant_field_fills_grid():
    grid = export_volume(ConstantField(sigma=2.0, rgb=(0.2, 0.5, 0.8)), BOX, (4, 5, 6))
    assert grid.density.shape == (6, 5, 4)
    assert grid.rgb.shape == (6, 5, 4, 3)
    assert grid.resolution == (4, 5, 6)
    np.testing.assert_allclose(grid.density, 2.0)
    np.testing.assert_allclose(grid.rgb[..., 2], 0.8)


def test_export_cell_centers_not_corners():
    # Density = x lets us read back exactly where samples were taken.
    class XField:
        def eval_batch(self, p, d):
            x = np.asarray(p)[:, 0]
            return np.maximum(x + 10.0, 0.0), np.zeros((len(x), 3), np.float32)

    grid = export_volume(XField(), BOX, (4, 2, 2))
    # Cells along x at -1 + (i + 0.5) * 2 / 4 = -0.75, -0.25, 0.25, 0.75.
    np.testing.assert_allclose(
        grid.density[0, 0] - 10.0, [-0.75, -0.25, 0.25, 0.75], atol=1e-6
    )


def test_export_budget_enforced():
    with pytest.raises(VolumeBudgetError, match="exceeds the budget"):
        export_volume(ConstantField(1.0, (1, 1, 1)), BOX, 64, cell_budget=64**3 - 1)
    export_volume(ConstantField(1.0, (1, 1, 1)), BOX, 8, cell_budget=8**3)


def test_grid_validation():
    ok = np.zeros((2, 2, 2), np.float32)
    with pytest.raises(VolumeError, match="every side >= 2"):
        VolumeGrid(BOX, np.zeros((1, 2, 2)), np.zeros((1, 2, 2, 3)))
    with pytest.raises(VolumeError, match="does not match"):
        VolumeGrid(BOX, ok, np.zeros((2, 2, 3, 3)))
    with pytest.raises(VolumeError, match="non-negative"):
        VolumeGrid(BOX, ok - 1.0, np.zeros((2, 2, 2, 3)))


def test_raw_roundtrip_bit_exact(tmp_path):
    grid = sphere_grid(9)
    write_slices(grid, tmp_path, fmt="raw")
    back = read_slices(tmp_path)
    assert back.density.tobytes() == grid.density.tobytes()
    assert back.rgb.tobytes() == grid.rgb.tobytes()
    np.testing.assert_array_equal(back.aabb.min, grid.aabb.min)
    np.testing.assert_array_equal(back.aabb.max, grid.aabb.max)


def test_png_roundtrip_within_quantization(tmp_path):
    grid = sphere_grid(8)
    write_slices(grid, tmp_path, fmt="png")
    back = read_slices(tmp_path)
    hi = float(grid.density.max())
    assert np.abs(back.density - grid.density).max() <= hi / 255 + 1e-6
    assert np.abs(back.rgb - np.clip(grid.rgb, 0, 1)).max() <= 1 / 255 + 1e-6


def test_meta_contents(tmp_path):
    grid = sphere_grid(6)
    meta_path = write_slices(grid, tmp_path, fmt="raw")
    meta = json.loads(meta_path.read_text())
    assert meta["format"] == "raw"
    assert meta["resolution"] == [6, 6, 6]
    assert meta["density_range"][0] == 0.0
    assert meta["density_range"][1] == pytest.approx(float(grid.density.max()))
    assert meta["aabb"]["min"] == [-1.0, -1.0, -1.0]
    assert meta["version"] == 1


def test_missing_meta_and_unknown_format(tmp_path):
    with pytest.raises(MissingSliceError, match="meta.json"):
        read_slices(tmp_path)
    grid = sphere_grid(4)
    meta_path = write_slices(grid, tmp_path, fmt="raw")
    meta = json.loads(meta_path.read_text())
    meta["format"] = "exr"
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(MetadataMismatchError, match="exr"):
        read_slices(tmp_path)


def test_missing_png_slice_names_index(tmp_path):
    grid = sphere_grid(5)
    write_slices(grid, tmp_path, fmt="png")
    (tmp_path / "slice_0003.png").unlink()
    with pytest.raises(MissingSliceError, match="slice 3"):
        read_slices(tmp_path)


def test_raw_size_mismatch_detected(tmp_path):
    grid = sphere_grid(4)
    write_slices(grid, tmp_path, fmt="raw")
    blob = (tmp_path / "volume.raw").read_bytes()
    (tmp_path / "volume.raw").write_bytes(blob[:-4])
    with pytest.raises(MetadataMismatchError, match="metadata implies"):
        read_slices(tmp_path)


def test_png_slice_size_mismatch_detected(tmp_path):
    grid = sphere_grid(4)
    write_slices(grid, tmp_path, fmt="png")
    meta_path = tmp_path / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["resolution"] = [4, 5, 4]
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(MetadataMismatchError, match="metadata says"):
        read_slices(tmp_path)


def test_malformed_meta_rejected(tmp_path):
    (tmp_path / "meta.json").write_text('{"format": "raw"}')
    with pytest.raises(MetadataMismatchError, match="malformed"):
        read_slices(tmp_path)


def test_bad_format_argument(tmp_path):
    with pytest.raises(VolumeError, match="'raw' or 'png'"):
        write_slices(sphere_grid(4), tmp_path, fmt="npz")


# --- transfer functions ---


def test_transfer_validation():
    with pytest.raises(VolumeError, match="two points"):
        TransferFunction(((0.0, 1.0, None),))
    with pytest.raises(VolumeError, match="non-decreasing"):
        TransferFunction(((1.0, 1.0, None), (0.0, 1.0, None)))
    with pytest.raises(VolumeError, match="opacity"):
        TransferFunction(((0.0, 1.5, None), (1.0, 1.0, None)))
    with pytest.raises(VolumeError, match="every point"):
        TransferFunction(((0.0, 1.0, (1, 0, 0)), (1.0, 1.0, None)))


def test_transfer_identity_passes_everything_through():
    mult, tint = TransferFunction.identity().evaluate(np.array([0.0, 0.5, 7.0, 1e4]))
    np.testing.assert_allclose(mult, 1.0)
    assert tint is None


def test_transfer_interpolates_and_clamps():
    tf = TransferFunction(((1.0, 0.0, None), (3.0, 1.0, None)))
    mult, _ = tf.evaluate(np.array([0.0, 1.0, 2.0, 3.0, 99.0]))
    np.testing.assert_allclose(mult, [0.0, 0.0, 0.5, 1.0, 1.0], atol=1e-6)


def test_transfer_tint_replaces_grid_color():
    tf = TransferFunction(((0.0, 1.0, (0, 0, 1)), (2.0, 1.0, (1, 0, 0))))
    grid = export_volume(ConstantField(sigma=1.0, rgb=(0, 1, 0)), BOX, 4)
    sigma, rgb = GridField(grid, tf).eval_batch(
        np.zeros((3, 3), np.float32), np.zeros((3, 3), np.float32)
    )
    np.testing.assert_allclose(rgb, [[0.5, 0.0, 0.5]] * 3, atol=1e-6)
    np.testing.assert_allclose(sigma, 1.0)


def test_transfer_scales_density():
    tf = TransferFunction(((0.0, 0.25, None), (100.0, 0.25, None)))
    grid = export_volume(ConstantField(sigma=8.0, rgb=(1, 1, 1)), BOX, 4)
    sigma, _ = GridField(grid, tf).eval_batch(
        np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32)
    )
    np.testing.assert_allclose(sigma, 2.0, atol=1e-6)


# --- trilinear sampling ---


def test_trilinear_exact_at_cell_centers():
    rng = np.random.default_rng(5)
    dens = rng.random((4, 5, 6)).astype(np.float32) * 3
    rgb = rng.random((4, 5, 6, 3)).astype(np.float32)
    grid = VolumeGrid(BOX, dens, rgb)
    nx, ny, nz = grid.resolution
    pts, want_d, want_c = [], [], []
    for iz in range(nz):
        centers = grid.cell_centers_z(iz)
        for iy in range(ny):
            for ix in range(nx):
                pts.append(centers[iy, ix])
                want_d.append(dens[iz, iy, ix])
                want_c.append(rgb[iz, iy, ix])
    sigma, color = GridField(grid).eval_batch(
        np.array(pts, np.float32), np.zeros((len(pts), 3), np.float32)
    )
    np.testing.assert_allclose(sigma, want_d, rtol=1e-5)
    np.testing.assert_allclose(color, want_c, rtol=1e-5, atol=1e-6)


def test_trilinear_midpoint_is_average():
    dens = np.zeros((2, 2, 2), np.float32)
    dens[0, 0, 0], dens[0, 0, 1] = 2.0, 6.0
    grid = VolumeGrid(BOX, dens, np.zeros((2, 2, 2, 3), np.float32))
    c = grid.cell_centers_z(0)
    mid = (c[0, 0] + c[0, 1]) / 2
    sigma, _ = GridField(grid).eval_batch(mid[None], np.zeros((1, 3), np.float32))
    assert sigma[0] == pytest.approx(4.0, abs=1e-5)


def test_constant_extension_at_borders():
    rng = np.random.default_rng(11)
    dens = rng.random((3, 3, 3)).astype(np.float32)
    grid = VolumeGrid(BOX, dens, np.zeros((3, 3, 3, 3), np.float32))
    corner = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], np.float32)
    sigma, _ = GridField(grid).eval_batch(corner, np.zeros((2, 3), np.float32))
    assert sigma[0] == pytest.approx(dens[0, 0, 0], abs=1e-5)
    assert sigma[1] == pytest.approx(dens[2, 2, 2], abs=1e-5)


# --- raycasting through the shared renderer ---


def camera_32():
    pose = pose_look_at(vec3(0, 0, 3.2), vec3(0, 0, 0), vec3(0, 1, 0))
    return Camera(pose=pose, fov_y=np.deg2rad(55), width=32, height=32)


def test_constant_field_pipeline_matches_direct_render(tmp_path):
    field = ConstantField(sigma=2.0, rgb=(0.2, 0.5, 0.8))
    settings = RenderSettings(width=32, height=32, samples_per_ray=96, aabb=BOX)
    cam = camera_32()
    direct = render_frame(field, cam, settings)
    write_slices(export_volume(field, BOX, 24), tmp_path, fmt="raw")
    cast = raycast_grid(read_slices(tmp_path), cam, settings)
    mae = np.abs(direct.data - cast.data).mean()
    assert mae < 0.02


def test_raycast_uses_grid_aabb():
    # Settings carry a far larger box; the grid's own box must win.
    grid = export_volume(ConstantField(1.5, (1, 1, 1)), BOX, 8)
    settings = RenderSettings(
        width=8, height=8, samples_per_ray=64, aabb=Aabb.centered_cube(50.0)
    )
    img = raycast_grid(grid, camera_32(), settings)
    # A 2-unit-deep constant slab: alpha = 1 - exp(-1.5 * 2) for the center ray.
    center = img.data[4, 4, 0]
    assert center == pytest.approx(1 - np.exp(-3.0), abs=0.02)


def test_manipulation_shifts_raycast():
    grid = sphere_grid(24)
    settings = RenderSettings(width=24, height=24, samples_per_ray=64, aabb=BOX)
    cam = camera_32()
    still = raycast_grid(grid, cam, settings)
    moved = raycast_grid(
        grid,
        cam,
        settings,
        manipulation=Similarity.from_translation(vec3(0.45, 0.0, 0.0)),
    )
    def centroid_x(img):
        w = img.data[..., 0] + 1e-9
        xs = np.arange(img.data.shape[1], dtype=np.float64)[None, :]
        return float((w * xs).sum() / w.sum())
    assert centroid_x(moved) > centroid_x(still) + 1.5


def test_manipulation_scale_thickens_medium():
    grid = export_volume(ConstantField(0.5, (1, 1, 1)), BOX, 8)
    settings = RenderSettings(width=8, height=8, samples_per_ray=128, aabb=BOX)
    pose = pose_look_at(vec3(0, 0, 8.0), vec3(0, 0, 0), vec3(0, 1, 0))
    cam = Camera(pose=pose, fov_y=np.deg2rad(30), width=8, height=8)
    plain = raycast_grid(grid, cam, settings).data[4, 4, 0]
    scaled = raycast_grid(
        grid, cam, settings, manipulation=Similarity.from_scale(2.0)
    ).data[4, 4, 0]
    assert plain == pytest.approx(1 - np.exp(-1.0), abs=0.02)
    assert scaled == pytest.approx(1 - np.exp(-2.0), abs=0.02)
