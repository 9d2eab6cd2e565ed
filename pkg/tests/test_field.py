import numpy as np
import pytest

from conftest import TINY_GRID, TINY_MLP, field_gradient_max_rel_error
from nerfkit.field import (
    ColoredBoxField,
    ConstantField,
    DomainError,
    HashGridConfig,
    MlpConfig,
    NeuralField,
    SphereField,
    dense_corner_index,
    encode_directions,
    encode_forward,
    field_eval,
    hash_corner_index,
    init_field_params,
    mlp_backward,
    mlp_forward,
    normalize_positions,
    preset_scene,
)
from nerfkit.geometry import Aabb


def test_growth_factor_matches_closed_form():
    cfg = HashGridConfig()
    assert np.isclose(cfg.growth, (256 / 16) ** (1 / 7))


def test_default_level_resolutions_frozen():
    # Oracle: round(16 * (16)^(l/7)) computed independently and frozen.
    assert HashGridConfig().level_resolutions == (16, 24, 35, 53, 78, 116, 172, 256)


def test_density_of_levels():
    cfg = HashGridConfig()
    # 17^3 = 4913 and 25^3 = 15625 fit in 16384 entries; 36^3 does not.
    assert [cfg.level_is_dense(l) for l in range(cfg.levels)] == [
        True, True, False, False, False, False, False, False,
    ]


def test_config_validation():
    with pytest.raises(ValueError):
        HashGridConfig(table_size=1000)  # not a power of two
    with pytest.raises(ValueError):
        HashGridConfig(levels=0)
    with pytest.raises(ValueError):
        HashGridConfig(base_resolution=512, max_resolution=256)
    with pytest.raises(ValueError):
        MlpConfig(hidden_width=0)


def test_dense_corner_index_example():
    # x + y*(N+1) + z*(N+1)^2 at N=16: 1 + 2*17 + 3*289 = 902.
    assert dense_corner_index(np.array([1, 2, 3]), 16) == 902
    assert dense_corner_index(np.array([0, 0, 0]), 16) == 0


def test_hash_corner_index_matches_python_int_oracle():
    # Wrapping uint32 arithmetic: products reduced mod 2^32, XORed, masked.
    rng = np.random.default_rng(0)
    coords = rng.integers(0, 1_000_000, size=(200, 3))
    table = 2**14
    got = hash_corner_index(coords, table)
    m = 2**32
    for (x, y, z), g in zip(coords, got):
        expect = ((int(x) % m) ^ (int(y) * 2654435761 % m) ^ (int(z) * 805459861 % m)) & (
            table - 1
        )
        assert g == expect
    assert hash_corner_index(np.array([0, 0, 0]), table) == 0
    assert np.all(got >= 0) and np.all(got < table)


def test_encode_returns_table_entries_at_vertices():
    cfg = HashGridConfig(levels=1, features_per_level=2, table_size=2**9,
                         base_resolution=4, max_resolution=4)
    rng = np.random.default_rng(1)
    tab = rng.normal(size=(cfg.table_size, 2)).astype(np.float32)
    verts = np.array([[i, j, k] for i in range(5) for j in range(5) for k in range(5)])
    u = verts.astype(np.float32) / 4.0
    feats, _ = encode_forward(u, [tab], cfg)
    np.testing.assert_array_equal(feats, tab[dense_corner_index(verts, 4)])


def test_encode_vertex_exactness_on_hashed_level():
    cfg = HashGridConfig(levels=1, features_per_level=2, table_size=2**6,
                         base_resolution=8, max_resolution=8)
    assert not cfg.level_is_dense(0)
    rng = np.random.default_rng(2)
    tab = rng.normal(size=(cfg.table_size, 2)).astype(np.float32)
    verts = np.array([[0, 0, 0], [8, 8, 8], [3, 5, 7], [8, 0, 4]])
    u = verts.astype(np.float32) / 8.0
    feats, _ = encode_forward(u, [tab], cfg)
    np.testing.assert_array_equal(feats, tab[hash_corner_index(verts, cfg.table_size)])


def test_encode_linear_along_axis():
    cfg = HashGridConfig(levels=1, features_per_level=2, table_size=2**9,
                         base_resolution=4, max_resolution=4)
    rng = np.random.default_rng(3)
    tab = rng.normal(size=(cfg.table_size, 2)).astype(np.float64)
    t = 0.375
    u = np.array([[(1 + t) / 4, 2 / 4, 3 / 4]], dtype=np.float64)
    feats, _ = encode_forward(u, [tab], cfg)
    v0 = tab[dense_corner_index(np.array([1, 2, 3]), 4)]
    v1 = tab[dense_corner_index(np.array([2, 2, 3]), 4)]
    np.testing.assert_allclose(feats[0], (1 - t) * v0 + t * v1, rtol=1e-12)


def test_encode_upper_edge_uses_last_cell():
    cfg = HashGridConfig(levels=1, features_per_level=1, table_size=2**9,
                         base_resolution=4, max_resolution=4)
    tab = np.arange(cfg.table_size, dtype=np.float64).reshape(-1, 1)
    feats, _ = encode_forward(np.array([[1.0, 1.0, 1.0]]), [tab], cfg)
    np.testing.assert_allclose(feats[0, 0], tab[dense_corner_index(np.array([4, 4, 4]), 4), 0])


def test_encode_deterministic():
    rng = np.random.default_rng(4)
    params = init_field_params(TINY_GRID, TINY_MLP, seed=9)
    u = rng.uniform(0, 1, size=(64, 3)).astype(np.float32)
    a, _ = encode_forward(u, params.tables, TINY_GRID, keep_cache=False)
    b, _ = encode_forward(u, params.tables, TINY_GRID, keep_cache=False)
    np.testing.assert_array_equal(a, b)


def test_direction_encoding_frozen_example():
    d = np.array([[1.0, 0.0, 0.0]])
    enc = encode_directions(d, degree=2)
    expected = np.array(
        [
            [
                np.sin(1), 0, 0, np.cos(1), 1, 1,
                np.sin(2), 0, 0, np.cos(2), 1, 1,
            ]
        ]
    )
    np.testing.assert_allclose(enc, expected, atol=1e-7)
    assert encode_directions(np.zeros((3, 3)), degree=4).shape == (3, 24)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    ws = [rng.normal(size=(6, 8)), rng.normal(size=(8, 4))]
    bs = [rng.normal(size=8), rng.normal(size=4)]
    x = rng.normal(size=(10, 6))
    proj = rng.normal(size=(10, 4))

    def loss():
        y, _ = mlp_forward(x, ws, bs)
        return float(np.sum(y * proj))

    y, cache = mlp_forward(x, ws, bs)
    gw, gb, _ = mlp_backward(proj, cache, ws)
    h = 1e-6
    for arrays, grads in ((ws, gw), (bs, gb)):
        for arr, g in zip(arrays, grads):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss()
                flat[i] = orig - h
                lo = loss()
                flat[i] = orig
                numeric = (hi - lo) / (2 * h)
                assert abs(numeric - gflat[i]) / max(abs(numeric), 1e-8) < 1e-6


def test_field_gradients_match_finite_differences():
    for seed in (0, 1):
        assert field_gradient_max_rel_error(seed) < 1e-4


def test_init_is_seeded_and_in_range():
    a = init_field_params(TINY_GRID, TINY_MLP, seed=3)
    b = init_field_params(TINY_GRID, TINY_MLP, seed=3)
    c = init_field_params(TINY_GRID, TINY_MLP, seed=4)
    for (_, x), (_, y) in zip(a.blocks(), b.blocks()):
        np.testing.assert_array_equal(x, y)
    assert any(
        not np.array_equal(x, y) for (_, x), (_, y) in zip(a.blocks(), c.blocks())
    )
    for t in a.tables:
        assert np.all(np.abs(t) <= 1e-4)
        assert np.any(t != 0)
    for bias in a.density_b + a.color_b:
        assert np.all(bias == 0)
    assert a.dtype == np.float32


def test_block_roundtrip():
    params = init_field_params(TINY_GRID, TINY_MLP, seed=0)
    names = [n for n, _ in params.blocks()]
    assert names[0] == "table0" and "density_w0" in names and "color_b2" in names
    replacement = np.ones_like(params.density_w[1])
    params.set_block("density_w1", replacement)
    assert params.density_w[1] is replacement
    with pytest.raises(KeyError):
        params.set_block("bogus", replacement)


def test_field_forward_shapes_and_determinism():
    params = init_field_params(TINY_GRID, TINY_MLP, seed=1)
    rng = np.random.default_rng(6)
    u = rng.uniform(0, 1, size=(32, 3)).astype(np.float32)
    d = rng.normal(size=(32, 3)).astype(np.float32)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    from nerfkit.field import field_forward

    s1, c1, _ = field_forward(u, d, params, TINY_GRID, TINY_MLP, keep_cache=False)
    s2, c2, _ = field_forward(u, d, params, TINY_GRID, TINY_MLP, keep_cache=False)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(c1, c2)
    assert s1.shape == (32,) and c1.shape == (32, 3)
    assert s1.dtype == np.float32
    assert np.all(s1 > 0) and np.all((c1 > 0) & (c1 < 1))


def test_field_eval_rejects_outside_positions():
    params = init_field_params(TINY_GRID, TINY_MLP, seed=1)
    box = Aabb.centered_cube(2.0)
    with pytest.raises(DomainError):
        field_eval(
            np.array([[0.0, 0.0, 1.5]]),
            np.array([[0.0, 0.0, -1.0]]),
            params,
            TINY_GRID,
            TINY_MLP,
            box,
        )


def test_normalize_positions_maps_box_corners():
    box = Aabb(np.array([-1, -2, -3], np.float32), np.array([1, 2, 3], np.float32))
    u = normalize_positions(np.array([[-1, -2, -3], [1, 2, 3], [0, 0, 0]]), box, np.float64)
    np.testing.assert_allclose(u, [[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]])


def test_neural_field_eval_batch():
    params = init_field_params(TINY_GRID, TINY_MLP, seed=2)
    nf = NeuralField(params, TINY_GRID, TINY_MLP, Aabb.centered_cube(2.0))
    pts = np.array([[0.0, 0.0, 0.0], [0.5, -0.5, 0.25]], dtype=np.float32)
    dirs = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0]], dtype=np.float32)
    sigma, rgb = nf.eval_batch(pts, dirs)
    assert sigma.shape == (2,) and rgb.shape == (2, 3)


def test_sigma_clamp_keeps_float32_finite():
    params = init_field_params(TINY_GRID, TINY_MLP, seed=0)
    # Force a huge pre-activation through the last density layer bias.
    params.density_b[-1][0] = 1e6
    nf = NeuralField(params, TINY_GRID, TINY_MLP, Aabb.centered_cube(2.0))
    sigma, _ = nf.eval_batch(np.zeros((4, 3), np.float32), np.tile([0, 0, -1.0], (4, 1)))
    assert np.all(np.isfinite(sigma))
    np.testing.assert_allclose(sigma, np.exp(10.0), rtol=1e-6)


def test_analytic_sphere_field():
    f = SphereField(radius=0.5, sigma=50.0, rgb=(0.9, 0.25, 0.2))
    pts = np.array([[0, 0, 0], [0.49, 0, 0], [0.51, 0, 0]], dtype=np.float32)
    sigma, rgb = f.eval_batch(pts, np.tile([0, 0, -1.0], (3, 1)))
    np.testing.assert_allclose(sigma, [50, 50, 0])
    np.testing.assert_allclose(rgb[0], [0.9, 0.25, 0.2])


def test_analytic_constant_field():
    f = ConstantField(sigma=2.0, rgb=(1, 1, 1))
    sigma, rgb = f.eval_batch(np.zeros((5, 3)), np.tile([0, 0, -1.0], (5, 1)))
    np.testing.assert_allclose(sigma, 2.0)
    np.testing.assert_allclose(rgb, 1.0)


def test_colored_box_octants_differ():
    f = ColoredBoxField(half_extent=(1, 1, 1), sigma=5.0)
    eps = 0.1
    pts = np.array(
        [[sx * eps, sy * eps, sz * eps] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)],
        dtype=np.float32,
    )
    sigma, rgb = f.eval_batch(pts, np.tile([0, 0, -1.0], (8, 1)))
    np.testing.assert_allclose(sigma, 5.0)
    assert len({tuple(np.round(c, 3)) for c in rgb}) == 8
    sigma_out, _ = f.eval_batch(np.array([[2.0, 0, 0]], np.float32), np.array([[0, 0, -1.0]]))
    assert sigma_out[0] == 0


def test_preset_scenes():
    for name, side in (("small", 2.0), ("medium", 4.0), ("large", 16.0)):
        scene_field, box = preset_scene(name)
        assert box.scale == side
        sigma, rgb = scene_field.eval_batch(
            np.zeros((1, 3), np.float32), np.array([[0, 0, -1.0]], np.float32)
        )
        assert sigma.shape == (1,) and rgb.shape == (1, 3)
    with pytest.raises(ValueError):
        preset_scene("galaxy")
