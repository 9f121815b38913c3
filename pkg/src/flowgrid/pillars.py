"""Dynamic pillar voxelization: cell assignment, 8D encoding, scatter/gather.

A pillar grid is a square 2D grid over the x-y plane; every in-range point
falls into exactly one cell (half-open on the high x/y edge, inclusive z
bounds). Per-point features are aggregated into cells by summation in a
canonical order, so grids are bit-identical under input permutation and
independent of any worker partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FNV_OFFSET = np.uint64(1469598103934665603)
_FNV_PRIME = np.uint64(1099511628211)


@dataclass(frozen=True)
class GridConfig:
    """Square pillar grid centered on the AV origin.

    extent: meters per side; cells: cell count per side; z bounds in meters.
    """

    extent: float = 170.0
    cells: int = 512
    z_min: float = -3.0
    z_max: float = 3.0

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be > 0")
        if self.cells < 1:
            raise ValueError("cells must be >= 1")
        if not self.z_min < self.z_max:
            raise ValueError("z_min must be < z_max")

    @property
    def cell_size(self) -> float:
        return self.extent / self.cells

    @property
    def z_center(self) -> float:
        return 0.5 * (self.z_min + self.z_max)


def pillar_index(xyz: np.ndarray, grid: GridConfig):
    """Cell indices for points (N, 3) -> (rows, cols, in_range).

    row indexes y, col indexes x: row = floor((y + extent/2) / cell_size).
    in_range requires 0 <= row, col < cells and z_min <= z <= z_max.
    Rows/cols are meaningful only where in_range is true.
    """
    p = np.asarray(xyz, dtype=np.float64)
    half = grid.extent / 2.0
    cols = np.floor((p[:, 0] + half) / grid.cell_size).astype(np.int64)
    rows = np.floor((p[:, 1] + half) / grid.cell_size).astype(np.int64)
    in_range = (
        (rows >= 0)
        & (rows < grid.cells)
        & (cols >= 0)
        & (cols < grid.cells)
        & (p[:, 2] >= grid.z_min)
        & (p[:, 2] <= grid.z_max)
    )
    return rows, cols, in_range


def pillar_centers(rows: np.ndarray, cols: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Cell center coordinates (N, 3); z is the z-range midpoint."""
    half = grid.extent / 2.0
    cx = -half + (cols + 0.5) * grid.cell_size
    cy = -half + (rows + 0.5) * grid.cell_size
    cz = np.full_like(cx, grid.z_center)
    return np.stack([cx, cy, cz], axis=1)


@dataclass(frozen=True)
class PillarAssignment:
    """Point-to-pillar assignment plus the 8D per-point encoding.

    encoding columns: (c_x, c_y, c_z, dx, dy, dz, f0, f1) where c is the
    pillar center and d = point - center. Rows for out-of-range points are
    zero and excluded via `mask`. `order` is the canonical permutation of
    the assigned-point subset (ascending cell id, ties broken by a content
    hash so summation order never depends on input order); `starts`/`cells_
    unique` delimit equal-cell runs of `order`.
    """

    grid: GridConfig
    n_points: int
    mask: np.ndarray        # (N,) bool
    cell: np.ndarray        # (N,) int64, row*cells+col, -1 where unassigned
    encoding: np.ndarray    # (N, 8) float32
    order: np.ndarray       # (M,) int64 indices into the original rows
    starts: np.ndarray      # (K,) int64 run starts within `order`
    cells_unique: np.ndarray  # (K,) int64 cell ids, ascending

    @property
    def n_assigned(self) -> int:
        return int(self.order.shape[0])


def _content_hash(encoding32: np.ndarray) -> np.ndarray:
    """FNV-1a over each row's float32 bit pattern; order-independent key."""
    bits = np.ascontiguousarray(encoding32, dtype=np.float32).view(np.uint32)
    h = np.full(encoding32.shape[0], _FNV_OFFSET, dtype=np.uint64)
    for j in range(encoding32.shape[1]):
        h = (h ^ bits[:, j].astype(np.uint64)) * _FNV_PRIME
    return h


def encode_points(points: np.ndarray, grid: GridConfig) -> PillarAssignment:
    """Assign points (N, 5: x, y, z, f0, f1) to pillars and encode them."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 5:
        raise ValueError("points must have shape (N, 5): x, y, z, f0, f1")
    n = p.shape[0]
    rows, cols, mask = pillar_index(p[:, :3], grid)

    enc = np.zeros((n, 8), dtype=np.float32)
    if mask.any():
        centers = pillar_centers(rows[mask], cols[mask], grid)
        enc[mask, 0:3] = centers
        enc[mask, 3:6] = p[mask, :3] - centers
        enc[mask, 6:8] = p[mask, 3:5]

    cell = np.where(mask, rows * grid.cells + cols, -1).astype(np.int64)

    idx = np.nonzero(mask)[0]
    if idx.size:
        key = (cell[idx].astype(np.uint64) << np.uint64(32)) | (
            _content_hash(enc[idx]) >> np.uint64(32)
        )
        order = idx[np.argsort(key, kind="stable")]
        sorted_cells = cell[order]
        run_start = np.empty(order.size, dtype=bool)
        run_start[0] = True
        np.not_equal(sorted_cells[1:], sorted_cells[:-1], out=run_start[1:])
        starts = np.nonzero(run_start)[0].astype(np.int64)
        cells_unique = sorted_cells[starts]
    else:
        order = np.empty(0, dtype=np.int64)
        starts = np.empty(0, dtype=np.int64)
        cells_unique = np.empty(0, dtype=np.int64)

    return PillarAssignment(grid, n, mask, cell, enc, order, starts, cells_unique)


def scatter_sum(features: np.ndarray, assignment: PillarAssignment) -> np.ndarray:
    """Sum per-point features (N, D) into a (cells, cells, D) grid.

    Cells with no points are zero. Summation runs in the assignment's
    canonical order, so the result is bitwise reproducible and invariant to
    permuting the input points (provided duplicate points carry equal
    features, which holds whenever features are a function of the encoding).
    """
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] != assignment.n_points:
        raise ValueError("features must be (N, D) row-aligned with the assignment")
    g = assignment.grid
    out = np.zeros((g.cells * g.cells, f.shape[1]), dtype=f.dtype)
    if assignment.order.size:
        sums = np.add.reduceat(f[assignment.order], assignment.starts, axis=0)
        out[assignment.cells_unique] = sums
    return out.reshape(g.cells, g.cells, f.shape[1])


def gather(grid_tensor: np.ndarray, assignment: PillarAssignment) -> np.ndarray:
    """Per-point rows from a (cells, cells, D) grid; unassigned rows zero.

    Returns (values (N, D), valid (N,)) where valid mirrors the assignment
    mask; downstream consumers must drop invalid rows.
    """
    t = np.asarray(grid_tensor)
    g = assignment.grid
    if t.shape[:2] != (g.cells, g.cells):
        raise ValueError("grid tensor shape does not match the assignment's grid")
    flat = t.reshape(g.cells * g.cells, -1)
    out = np.zeros((assignment.n_points, flat.shape[1]), dtype=t.dtype)
    m = assignment.mask
    out[m] = flat[assignment.cell[m]]
    return out, m.copy()


def occupancy(assignment: PillarAssignment) -> np.ndarray:
    """Point count per cell, (cells, cells) int64."""
    g = assignment.grid
    counts = np.zeros(g.cells * g.cells, dtype=np.int64)
    if assignment.order.size:
        ends = np.append(assignment.starts[1:], assignment.order.size)
        counts[assignment.cells_unique] = ends - assignment.starts
    return counts.reshape(g.cells, g.cells)
