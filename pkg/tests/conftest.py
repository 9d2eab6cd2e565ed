"""Shared oracles for the test suite, mainly the finite-difference check."""

import numpy as np

from nerfkit.field import (
    FieldParams,
    HashGridConfig,
    MlpConfig,
    field_backward,
    field_forward,
    init_field_params,
)

TINY_GRID = HashGridConfig(
    levels=3, features_per_level=2, table_size=2**9, base_resolution=4, max_resolution=16
)
TINY_MLP = MlpConfig(
    hidden_width=8, density_layers=2, color_layers=2, latent_dim=4, dir_encoding_degree=2
)


def field_gradient_max_rel_error(
    seed: int,
    n_points: int = 12,
    entries_per_block: int = 5,
    h: float = 1e-6,
) -> float:
    """Compare analytic field gradients to central finite differences.

    Runs the tiny configuration in float64. The loss is a fixed random
    projection of (sigma, rgb), so its exact gradient is the projection
    vector routed through field_backward. Returns the max relative error
    over sampled entries of every parameter block.
    """
    rng = np.random.default_rng(seed)
    params = init_field_params(TINY_GRID, TINY_MLP, seed=seed, dtype=np.float64)
    # Lift the tables out of the tiny-init regime so table gradients are
    # not dominated by float round-off in the FD numerator.
    params = FieldParams(
        [t + rng.normal(0, 0.05, size=t.shape) for t in params.tables],
        params.density_w,
        params.density_b,
        params.color_w,
        params.color_b,
    )
    u = rng.uniform(0.0, 1.0, size=(n_points, 3))
    dirs = rng.normal(size=(n_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj_sigma = rng.normal(size=n_points)
    proj_rgb = rng.normal(size=(n_points, 3))

    def loss(p: FieldParams) -> float:
        sigma, rgb, _ = field_forward(u, dirs, p, TINY_GRID, TINY_MLP, keep_cache=False)
        return float(np.sum(sigma * proj_sigma) + np.sum(rgb * proj_rgb))

    sigma, rgb, cache = field_forward(u, dirs, params, TINY_GRID, TINY_MLP)
    grads = field_backward(proj_sigma, proj_rgb, cache, params, TINY_GRID, TINY_MLP)

    worst = 0.0
    for name, array in params.blocks():
        flat = array.reshape(-1)
        gflat = grads[name].reshape(-1)
        if name.startswith("table"):
            # Only probe entries the batch actually touched.
            touched = np.flatnonzero(np.abs(gflat) > 0)
            if touched.size == 0:
                continue
            picks = rng.choice(touched, size=min(entries_per_block, touched.size), replace=False)
        else:
            picks = rng.choice(flat.size, size=min(entries_per_block, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            hi = loss(params)
            flat[i] = orig - h
            lo = loss(params)
            flat[i] = orig
            numeric = (hi - lo) / (2 * h)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
