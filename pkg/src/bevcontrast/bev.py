"""Bird's-eye-view pooling: average point features inside ``b x b`` cells of an ``M x M`` grid.

The grid is centred on the sensor origin and spans ``[-M*b/2, M*b/2)`` on both
axes. Column ``j`` indexes x and row ``i`` indexes y; cells are half-open so a
point exactly on the far edge is dropped. Cell features are stored flattened,
row ``i * M + j`` of an ``(M*M, D)`` tensor.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParameterError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class BevGrid:
    """Features ``(M*M, D)`` plus per-cell integer ``counts`` and float ``occupancy``, both ``(M, M)``.

    For pooled grids ``occupancy`` is the binarised count; for warped grids it
    holds the interpolated occupancy weights.
    """

    features: ad.Tensor
    counts: np.ndarray
    occupancy: np.ndarray
    cell_size: float
    size: int
    dropped: int = 0

    @property
    def dim(self):
        return self.features.shape[1]

    def array(self) -> np.ndarray:
        """Feature values as an ``(M, M, D)`` array."""
        return self.features.data.reshape(self.size, self.size, -1)

    def occupied(self):
        """``(i, j)`` of cells with a positive count, row-major order."""
        return np.argwhere(self.counts > 0)


@dataclass(frozen=True)
class CellIndex:
    i: int
    j: int


def half_extent(b, M):
    return M * b / 2.0


def _check_grid(b, M):
    if not b > 0:
        raise ParameterError(f"cell size must be positive, got {b}")
    if int(M) != M or M < 1:
        raise ParameterError(f"grid size must be a positive integer, got {M}")


def cell_of(x, y, b, M):
    """``CellIndex`` holding metric point ``(x, y)``, or ``None`` outside the grid."""
    _check_grid(b, M)
    i, j, ok = cell_indices(np.array([[x, y]]), b, M)
    return CellIndex(int(i[0]), int(j[0])) if ok[0] else None


def cell_indices(xy, b, M):
    """Vectorised :func:`cell_of`: returns ``(rows, cols, inside)``."""
    xy = np.asarray(xy, dtype=np.float64)
    H = half_extent(b, M)
    cols = np.floor((xy[:, 0] + H) / b)
    rows = np.floor((xy[:, 1] + H) / b)
    inside = (cols >= 0) & (cols < M) & (rows >= 0) & (rows < M)
    return rows.astype(np.int64), cols.astype(np.int64), inside


def cell_center(i, j, b, M):
    """Metric ``(x, y)`` of the centre of cell ``(i, j)``."""
    H = half_extent(b, M)
    return (np.asarray(j) + 0.5) * b - H, (np.asarray(i) + 0.5) * b - H


def flat_groups(xy, b, M):
    """Flattened cell id per point, -1 for points outside the grid."""
    rows, cols, inside = cell_indices(xy, b, M)
    return np.where(inside, rows * M + cols, -1)


def bev_pool(features, cloud, b, M, tape=None) -> BevGrid:
    """Average ``features`` (one row per point of ``cloud``) per BEV cell; z is ignored."""
    _check_grid(b, M)
    M = int(M)
    feats = features if isinstance(features, ad.Tensor) else ad.constant(features)
    if feats.data.ndim != 2 or feats.shape[0] != len(cloud):
        raise ShapeError(f"bev_pool: {feats.shape} features for {len(cloud)} points")
    if tape is not None and feats.tape not in (None, tape):
        raise ContractError("bev_pool: features recorded on a different tape")
    groups = flat_groups(cloud.xy, b, M)
    dropped = int((groups < 0).sum())
    if dropped:
        log.debug("bev_pool: %d of %d points outside the grid", dropped, len(cloud))
    pooled, counts = ad.reduce_mean_by_group(feats, groups, M * M)
    counts = counts.reshape(M, M)
    return BevGrid(pooled, counts, (counts > 0).astype(np.float64), float(b), M, dropped)


def bev_native_ingest(grid_features, occupancy, cell_size=1.0, tape=None) -> BevGrid:
    """Wrap an externally produced ``(M, M, D)`` BEV map; no pooling is applied.

    Occupancy flags become counts of 1/0. With a ``tape`` the features become a
    differentiable leaf.
    """
    occ = np.asarray(occupancy)
    if isinstance(grid_features, ad.Tensor):
        data = grid_features.data
    else:
        data = np.asarray(grid_features, dtype=np.float64)
    if data.ndim != 3 or occ.shape != data.shape[:2] or data.shape[0] != data.shape[1]:
        raise ShapeError(f"bev_native_ingest: features {data.shape} vs occupancy {occ.shape}")
    M, D = data.shape[0], data.shape[2]
    counts = (occ != 0).astype(np.int64)
    if isinstance(grid_features, ad.Tensor) and grid_features.tape is not None:
        feats = ad.reshape(grid_features, (M * M, D))
    elif tape is not None:
        feats = tape.leaf(data.reshape(M * M, D), op="bev_native")
    else:
        feats = ad.constant(data.reshape(M * M, D))
    return BevGrid(feats, counts, counts.astype(np.float64), float(cell_size), M)


def write_debug_csv(grid: BevGrid, path, header=None):
    """Occupied cells as rows ``i, j, count, feat_0..feat_{D-1}`` (row-major order)."""
    arr = grid.array()
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "count"] + [f"feat_{d}" for d in range(grid.dim)])
        for i, j in grid.occupied():
            w.writerow([i, j, grid.counts[i, j]] + [repr(float(v)) for v in arr[i, j]])


def read_debug_csv(path):
    """Parse a debug dump back to ``(i, j, count, features)`` arrays."""
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
    return body[:, 0].astype(int), body[:, 1].astype(int), body[:, 2].astype(int), body[:, 3:]
