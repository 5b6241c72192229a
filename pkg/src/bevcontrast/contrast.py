"""Alignment of the second BEV grid onto the first, cell sampling and the cell-level InfoNCE loss.

Three alignment variants are provided: backward warping of the pooled grid with
bilinear or nearest-neighbour sampling (driven by the planar affine part of the
relative pose), or exact 3D registration of the points before pooling.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bev import BevGrid, bev_pool, half_extent
from .errors import ContractError, EmptyOverlapError, ParameterError, ShapeError
from .geometry import Affine2D, affine2d_from_se3, affine2d_invert, register_3d

# source coordinates this close to an integer cell index are snapped onto it,
# so exact grid motions are reproduced bit-for-bit despite metric roundoff
SNAP_TOL = 1e-9


class AlignMode(enum.Enum):
    BILINEAR_2D = "2d_bilinear"
    NEAREST_2D = "2d_nearest"
    EXACT_3D = "3d"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"bilinear": cls.BILINEAR_2D, "nearest": cls.NEAREST_2D, "exact": cls.EXACT_3D,
                   "2d_bi": cls.BILINEAR_2D, "2d_nn": cls.NEAREST_2D}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ParameterError(f"unknown align mode {value!r}") from None


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    n_samples: int = 4096
    seed: int = 0
    occupancy_eps: float = 1e-6

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.n_samples < 2:
            raise ParameterError(f"n_samples must be >= 2, got {self.n_samples}")
        if not self.occupancy_eps > 0:
            raise ParameterError("occupancy_eps must be positive")


def source_coords(affine: Affine2D, b, M):
    """Continuous source ``(col, row)`` sampled by every destination cell, shape ``(M*M, 2)``.

    Destination centres are mapped through the inverse affine; the metric to
    cell conversion is folded into a cell-space affine first.
    """
    inv = affine2d_invert(affine)
    k = np.full(2, b / 2.0 - half_extent(b, M))
    offset = ((inv.A - np.eye(2)) @ k + inv.b2) / b
    rows, cols = np.divmod(np.arange(M * M), M)
    dst = np.stack([cols, rows], axis=1).astype(np.float64)
    src = dst @ inv.A.T + offset
    near = np.round(src)
    return np.where(np.abs(src - near) < SNAP_TOL, near, src)


def _neighbor_index(r, c, M):
    ok = (r >= 0) & (r < M) & (c >= 0) & (c < M)
    return np.where(ok, r * M + c, -1)


def _warped_grid(src: BevGrid, idx, w):
    feats = ad.row_mix(src.features, idx, w)
    occ_src = np.minimum(src.counts, 1).astype(np.float64).reshape(-1)
    valid = idx >= 0
    occ = (np.where(valid, w, 0.0) * occ_src[np.where(valid, idx, 0)]).sum(axis=1)
    M = src.size
    occ = occ.reshape(M, M)
    return BevGrid(feats, (occ > 0).astype(np.int64), occ, src.cell_size, M)


def warp_bilinear(src: BevGrid, affine: Affine2D) -> BevGrid:
    """Backward-warp ``src`` by ``affine`` with bilinear blending; outside the grid reads zero.

    No occupancy-based rescaling is applied to the blended features.
    """
    M = src.size
    xy = source_coords(affine, src.cell_size, M)
    c0 = np.floor(xy[:, 0])
    r0 = np.floor(xy[:, 1])
    fc = xy[:, 0] - c0
    fr = xy[:, 1] - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    idx = np.stack([_neighbor_index(r0, c0, M), _neighbor_index(r0, c0 + 1, M),
                    _neighbor_index(r0 + 1, c0, M), _neighbor_index(r0 + 1, c0 + 1, M)], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return _warped_grid(src, idx, w)


def warp_nearest(src: BevGrid, affine: Affine2D) -> BevGrid:
    """Backward-warp ``src`` copying the nearest source cell (round half up per axis)."""
    M = src.size
    xy = source_coords(affine, src.cell_size, M)
    c = np.floor(xy[:, 0] + 0.5).astype(np.int64)
    r = np.floor(xy[:, 1] + 0.5).astype(np.int64)
    idx = _neighbor_index(r, c, M)[:, None]
    return _warped_grid(src, idx, np.ones_like(idx, dtype=np.float64))


def align_exact3d(features, cloud, rel, b, M, tape=None) -> BevGrid:
    """Register the points in 3D first, then pool; no interpolation involved."""
    return bev_pool(features, register_3d(cloud, rel), b, M, tape)


def align(mode, features_b, cloud_b, rel, b, M, tape=None, pooled_b=None) -> BevGrid:
    """Second scan's grid expressed in the first scan's BEV frame, per ``mode``."""
    mode = AlignMode.parse(mode)
    if mode is AlignMode.EXACT_3D:
        return align_exact3d(features_b, cloud_b, rel, b, M, tape)
    if pooled_b is None:
        pooled_b = bev_pool(features_b, cloud_b, b, M, tape)
    affine = affine2d_from_se3(rel)
    if mode is AlignMode.BILINEAR_2D:
        return warp_bilinear(pooled_b, affine)
    return warp_nearest(pooled_b, affine)


def qualifying_cells(b_grid: BevGrid, bt_grid: BevGrid, occupancy_eps=1e-6):
    """``(i, j)`` of cells occupied in the reference grid and in the aligned grid."""
    if b_grid.size != bt_grid.size:
        raise ShapeError(f"grid sizes differ: {b_grid.size} vs {bt_grid.size}")
    return np.argwhere((b_grid.counts > 0) & (bt_grid.occupancy > occupancy_eps))


def sample_cells(b_grid: BevGrid, bt_grid: BevGrid, cfg: LossConfig):
    """Up to ``cfg.n_samples`` qualifying cells drawn uniformly without replacement.

    Returned as an ``(k, 2)`` array of ``(i, j)`` sorted row-major.
    """
    qual = qualifying_cells(b_grid, bt_grid, cfg.occupancy_eps)
    if len(qual) == 0:
        raise EmptyOverlapError("no cell is occupied in both aligned grids")
    if len(qual) <= cfg.n_samples:
        return qual
    rng = np.random.default_rng(cfg.seed)
    pick = np.sort(rng.choice(len(qual), size=cfg.n_samples, replace=False))
    return qual[pick]


def _flat(cells, M):
    cells = np.array([(c.i, c.j) if hasattr(c, "i") else tuple(c) for c in cells], dtype=np.int64)
    return cells.reshape(-1, 2) @ np.array([M, 1])


def contrastive_loss(b_grid: BevGrid, bt_grid: BevGrid, cells, tau=0.07, eps=1e-12) -> ad.Tensor:
    """Cell-level InfoNCE over the sampled cells, summed over anchors.

    Anchors are the aligned cells ``bt[l]``; candidates are the reference
    cells ``b[m]`` of the same sample. Rows are l2-normalised first.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    rows = _flat(cells, b_grid.size)
    if rows.size < 2:
        raise ContractError(f"need at least 2 cells, got {rows.size}")
    ref = ad.l2_normalize_rows(ad.gather_rows(b_grid.features, rows), eps)
    anc = ad.l2_normalize_rows(ad.gather_rows(bt_grid.features, rows), eps)
    logits = ad.scale(ad.matmul(anc, ad.transpose(ref)), 1.0 / tau)
    positives = ad.reduce_sum(ad.mul(logits, np.eye(rows.size)))
    return ad.add(ad.reduce_sum(ad.log_sum_exp_rows(logits)), ad.scale(positives, -1.0))
