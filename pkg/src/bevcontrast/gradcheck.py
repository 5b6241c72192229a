"""Finite-difference check of the full encode -> pool -> align -> loss gradient."""
from __future__ import annotations

import numpy as np

from .contrast import AlignMode
from .encoder import EncoderParams, init_params
from .geometry import RigidTransform, rotation_z
from .io_kitti import PointCloud
from .trainer import TrainConfig, TrainingPair, pair_loss


def random_pair(seed, n_points=30, extent=5.0):
    """Two small scans of one random scene, the second seen from a moved sensor."""
    rng = np.random.default_rng(seed)
    world = np.column_stack([rng.uniform(-extent, extent, (n_points, 2)), rng.uniform(-2.0, 2.0, n_points),
                             rng.uniform(0.0, 1.0, n_points)])
    rel = RigidTransform(rotation_z(rng.uniform(-0.3, 0.3)), (*rng.uniform(-1.0, 1.0, 2), 0.0))
    cloud_a = PointCloud(world, scan_id=0)
    moved = world.copy()
    moved[:, :3] = rel.inverse().apply(world[:, :3])
    moved[:, :3] += rng.normal(0, 0.05, (n_points, 3))
    return TrainingPair(cloud_a, PointCloud(moved, scan_id=1), rel)


def relative_errors(analytic, numeric, floor=1e-3):
    """Elementwise ``|a - n| / max(|a|, |n|, floor * max|n|)``.

    The floor is relative to the largest entry of the tensor, so entries many orders below it
    (where central differences carry mostly roundoff) do not dominate the maximum.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = max(floor * float(np.max(np.abs(n), initial=0.0)), 1e-12)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)


def relu_pattern(params: EncoderParams, clouds):
    """Sign pattern of every hidden preactivation, for detecting kinks inside a stencil."""
    pats = []
    for cloud in clouds:
        h = cloud.points
        if params.center_input:
            h = h.copy()
            h[:, :3] -= h[:, :3].mean(axis=0)
        for W, b in zip(params.weights[:-1], params.biases[:-1]):
            z = h @ W + b
            pats.append(z > 0)
            h = np.maximum(z, 0.0)
    return np.concatenate([p.ravel() for p in pats])


def numeric_grads(params: EncoderParams, pair, cfg, sample_seed, h=1e-5):
    """Central differences per parameter entry.

    Entries whose stencil flips a ReLU somewhere sit on a kink of the loss, where no derivative
    exists; they come back as NaN.
    """
    arrays = params.arrays()
    clouds = (pair.cloud_a, pair.cloud_b)
    base = relu_pattern(params, clouds)
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [x.copy() for x in arrays]
                shifted[k][idx] += sign * h
                p = EncoderParams.from_arrays(shifted, params.center_input)
                if not np.array_equal(relu_pattern(p, clouds), base):
                    vals = [np.nan, np.nan]
                    break
                vals.append(pair_loss(p, pair, cfg, sample_seed, with_grads=False)[0])
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def gradcheck(seed=0, mode=AlignMode.BILINEAR_2D, n_points=30, hidden=32, dim=16, h=1e-5, tau=0.5):
    """Max relative error of dL/dtheta against central differences on a random pair.

    Returns ``(max_error, n_checked, n_skipped)``; skipped entries straddle a ReLU kink.
    """
    cfg = TrainConfig(cell_size=1.5, grid_size=8, tau=tau, n_samples=64, hidden=hidden, dim=dim,
                      align_mode=AlignMode.parse(mode).value, seed=seed)
    pair = random_pair(seed, n_points)
    params = init_params(seed, hidden, dim)
    _, _, analytic = pair_loss(params, pair, cfg, seed)
    numeric = numeric_grads(params, pair, cfg, seed, h)
    errs = np.concatenate([relative_errors(a, np.nan_to_num(n)).ravel()[~np.isnan(n).ravel()]
                           for a, n in zip(analytic, numeric)])
    n_skipped = sum(int(np.isnan(n).sum()) for n in numeric)
    return float(errs.max()), errs.size, n_skipped
