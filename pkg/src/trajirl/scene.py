"""Occupancy-grid pooling of neighbour hidden states and the scene analyzer.

Grid convention: the grid is axis aligned and centred on the target. A
neighbour at relative offset (dx, dy) falls in column
``floor((dx + half) / cell)`` and row ``floor((dy + half) / cell)``, so row 0
holds the most negative y offsets. Intervals are half open, ``[lo, hi)``.
Cells are flattened row-major and each holds the mean hidden state of its
occupants (zeros when empty).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape
from .nn import DenseLayer, dense_forward


@dataclass(frozen=True)
class GridConfig:
    n_cells: int = 4
    cell_size: float = 2.0

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    @property
    def half_width(self) -> float:
        return self.n_cells * self.cell_size / 2.0


@dataclass
class NeighborObservation:
    agent_id: int
    position: np.ndarray
    hidden_state: np.ndarray


def cell_index(rel: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Flat cell index for relative offsets ``rel[..., 2]``; -1 outside the grid."""
    rel = np.asarray(rel, dtype=np.float64)
    col = np.floor((rel[..., 0] + grid.half_width) / grid.cell_size)
    row = np.floor((rel[..., 1] + grid.half_width) / grid.cell_size)
    n = grid.n_cells
    inside = (col >= 0) & (col < n) & (row >= 0) & (row < n)
    flat = np.where(inside, row * n + col, -1)
    return flat.astype(np.int64)


def pool_hidden(centers: np.ndarray, positions: np.ndarray, hidden: np.ndarray,
                grid: GridConfig, exclude_self: bool = True) -> np.ndarray:
    """Grid pooling for several targets at once.

    centers : (N, 2) grid centres, one per target
    positions : (K, 2) neighbour positions
    hidden : (K, H) neighbour hidden states
    exclude_self : when true, target i never pools entry i (requires K == N)

    Returns an (N, n_cells**2 * H) array. Occupants are summed in index order.
    """
    centers = np.asarray(centers, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    hidden = np.asarray(hidden, dtype=np.float64)
    n_t = centers.shape[0]
    k, h = hidden.shape
    if positions.shape[0] != k:
        raise ShapeError(f"pool: {positions.shape[0]} positions vs {k} hidden states")
    cells = grid.n_cells ** 2
    flat = cell_index(positions[None, :, :] - centers[:, None, :], grid)  # (N, K)
    valid = flat >= 0
    if exclude_self:
        valid &= ~np.eye(n_t, k, dtype=bool)
    tgt, nbr = np.nonzero(valid)
    slot = tgt * cells + flat[tgt, nbr]
    sums = np.zeros((n_t * cells, h))
    np.add.at(sums, slot, hidden[nbr])
    counts = np.bincount(slot, minlength=n_t * cells).astype(np.float64)
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None]
    return sums.reshape(n_t, cells * h)


def build_occupancy_pool(target_pos, neighbors: list[NeighborObservation],
                         grid: GridConfig, hidden_dim: int | None = None) -> np.ndarray:
    """Pooled vector of length ``n_cells**2 * hidden`` for one target."""
    sizes = {len(nb.hidden_state) for nb in neighbors}
    if len(sizes) > 1:
        raise ShapeError(f"inconsistent neighbour hidden sizes {sorted(sizes)}")
    if not neighbors:
        if hidden_dim is None:
            raise ValueError("hidden_dim is required when there are no neighbours")
        return np.zeros(grid.n_cells ** 2 * hidden_dim)
    if hidden_dim is not None and hidden_dim not in sizes:
        raise ShapeError(f"neighbour hidden size {sizes.pop()} != {hidden_dim}")
    # a fixed summation order keeps the result independent of list order
    ordered = sorted(neighbors, key=lambda nb: nb.agent_id)
    pos = np.array([nb.position for nb in ordered], dtype=np.float64)
    hid = np.array([nb.hidden_state for nb in ordered], dtype=np.float64)
    return pool_hidden(np.asarray(target_pos, dtype=np.float64)[None], pos, hid, grid,
                       exclude_self=False)[0]


def analyzer_forward(tape: Tape, pooled: int, analyzer: DenseLayer) -> int:
    return dense_forward(tape, pooled, analyzer, "relu")


def scene_context_for_predicted(tape: Tape, pred_pos, neighbor_obs: list[NeighborObservation],
                                grid: GridConfig, analyzer: DenseLayer,
                                hidden_dim: int | None = None) -> int:
    """Context vector at a predicted position; the grid lookup carries no gradient."""
    pooled = build_occupancy_pool(pred_pos, neighbor_obs, grid, hidden_dim)
    return analyzer_forward(tape, tape.constant(pooled), analyzer)
