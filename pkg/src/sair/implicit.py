"""Continuous coordinate queries over latent grids.

Coordinates are ``(row, col)`` pairs in ``[-1, 1]^2``. A grid of ``n`` cells
along an axis puts cell ``i`` at the center ``-1 + (2i + 1) / n``. A query is
answered by the four latent cells surrounding it, each weighted by the area of
the rectangle between the query and the diagonally opposite cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .errors import InvalidArgumentError, ShapeError

__all__ = [
    "CoordinateGrid",
    "LocalNeighborhood",
    "QueryBatch",
    "make_coordinate_grid",
    "cell_centers",
    "build_neighborhood",
    "build_query_batch",
    "gather_cells",
    "local_ensemble_query",
]


def cell_centers(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    return -1.0 + (2.0 * torch.arange(n, dtype=dtype, device=device) + 1.0) / n


@dataclass(frozen=True)
class CoordinateGrid:
    height: int
    width: int
    coords: torch.Tensor  # (H, W, 2)

    def flat(self) -> torch.Tensor:
        return self.coords.reshape(-1, 2)


def make_coordinate_grid(height: int, width: int, dtype=torch.float32, device=None) -> CoordinateGrid:
    if int(height) < 1 or int(width) < 1:
        raise InvalidArgumentError(f"grid dimensions must be >= 1, got {height}x{width}")
    rows = cell_centers(height, dtype, device)
    cols = cell_centers(width, dtype, device)
    coords = torch.stack(torch.meshgrid(rows, cols, indexing="ij"), dim=-1)
    return CoordinateGrid(int(height), int(width), coords)


@dataclass(frozen=True)
class LocalNeighborhood:
    """The four cells answering one query ``p``.

    ``neighbors`` holds ``(row, col)`` indices in the order
    ``(r0, c0), (r0, c1), (r1, c0), (r1, c1)``; indices are clamped at the
    border, so duplicates are possible.
    """

    query: torch.Tensor  # (2,)
    neighbors: torch.Tensor  # (4, 2) long
    centers: torch.Tensor  # (4, 2)
    offsets: torch.Tensor  # (4, 2), (p - q) * (H, W)
    weights: torch.Tensor  # (4,)


@dataclass(frozen=True)
class QueryBatch:
    coords: torch.Tensor  # (B, N, 2)
    grid_size: tuple[int, int]
    index: torch.Tensor  # (B, N, 4) flat index into the h*w cells
    cells: torch.Tensor  # (B, N, 4, 2) row/col indices
    offsets: torch.Tensor  # (B, N, 4, 2)
    weights: torch.Tensor  # (B, N, 4)
    cell: Optional[torch.Tensor] = None  # (B, N, 2) query footprint, normalized units

    @property
    def num_queries(self) -> int:
        return self.coords.shape[1]


def _axis_neighbors(u: torch.Tensor, n: int):
    """Bracketing cells and linear weights along one axis.

    ``u`` is the continuous cell index (cell centers sit at integers).
    """
    lo = torch.floor(u)
    i0 = lo.clamp(0, n - 1)
    i1 = (lo + 1).clamp(0, n - 1)
    d0 = (u - i0).abs()
    d1 = (u - i1).abs()
    total = d0 + d1
    # both neighbors collapse onto one cell at the border or on a 1-cell axis
    degenerate = total == 0
    safe = torch.where(degenerate, torch.ones_like(total), total)
    w0 = torch.where(degenerate, torch.full_like(total, 0.5), d1 / safe)
    w1 = torch.where(degenerate, torch.full_like(total, 0.5), d0 / safe)
    return i0.long(), i1.long(), w0, w1


def _check_coords(coords: torch.Tensor) -> None:
    if coords.shape[-1] != 2:
        raise ShapeError(f"coordinates must end in a size-2 axis, got {tuple(coords.shape)}")
    if not torch.isfinite(coords).all():
        raise InvalidArgumentError("query coordinates must be finite")
    if (coords.abs() > 1.0).any():
        raise InvalidArgumentError("query coordinates must lie in [-1, 1]^2")


def build_query_batch(coords: torch.Tensor, grid_size, cell: Optional[torch.Tensor] = None) -> QueryBatch:
    """Neighborhoods for a ``(B, N, 2)`` (or ``(N, 2)``) coordinate tensor.

    Weights are the normalized areas of the query-to-diagonal-cell rectangles.
    Those areas factor into per-axis distances, which is how they are computed
    here; the factorization also makes exact cell centers well defined.
    """
    h, w = int(grid_size[0]), int(grid_size[1])
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"grid dimensions must be >= 1, got {h}x{w}")
    if coords.dim() == 2:
        coords = coords.unsqueeze(0)
        if cell is not None and cell.dim() == 2:
            cell = cell.unsqueeze(0)
    _check_coords(coords)
    coords = coords.detach()
    # index arithmetic in float64; low-precision coords would otherwise lose ~h ulps here
    p = coords.double()

    u = (p[..., 0] + 1.0) * (h / 2.0) - 0.5
    v = (p[..., 1] + 1.0) * (w / 2.0) - 0.5
    r0, r1, wr0, wr1 = _axis_neighbors(u, h)
    c0, c1, wc0, wc1 = _axis_neighbors(v, w)

    rows = torch.stack([r0, r0, r1, r1], dim=-1)
    cols = torch.stack([c0, c1, c0, c1], dim=-1)
    weights = torch.stack([wr0 * wc0, wr0 * wc1, wr1 * wc0, wr1 * wc1], dim=-1)

    row_c = -1.0 + (2.0 * rows.double() + 1.0) / h
    col_c = -1.0 + (2.0 * cols.double() + 1.0) / w
    offsets = torch.stack(
        [(p[..., 0:1] - row_c) * h, (p[..., 1:2] - col_c) * w], dim=-1
    ).to(coords.dtype)
    weights = weights.to(coords.dtype)
    return QueryBatch(
        coords=coords,
        grid_size=(h, w),
        index=rows * w + cols,
        cells=torch.stack([rows, cols], dim=-1),
        offsets=offsets,
        weights=weights,
        cell=cell,
    )


def build_neighborhood(grid: CoordinateGrid, p) -> LocalNeighborhood:
    p = torch.as_tensor(p, dtype=grid.coords.dtype)
    if p.shape != (2,):
        raise ShapeError(f"a single query must have shape (2,), got {tuple(p.shape)}")
    batch = build_query_batch(p.view(1, 1, 2), (grid.height, grid.width))
    cells = batch.cells[0, 0]
    centers = grid.coords[cells[:, 0], cells[:, 1]]
    return LocalNeighborhood(
        query=p,
        neighbors=cells,
        centers=centers,
        offsets=batch.offsets[0, 0],
        weights=batch.weights[0, 0],
    )


def gather_cells(feature_map: torch.Tensor, batch: QueryBatch) -> torch.Tensor:
    """Features of every neighbor cell: ``(B, C, h, w) -> (B, N, 4, C)``."""
    if feature_map.dim() != 4:
        raise ShapeError(f"feature map must be (B, C, h, w), got {tuple(feature_map.shape)}")
    if tuple(feature_map.shape[-2:]) != tuple(batch.grid_size):
        raise ShapeError(
            f"feature map is {tuple(feature_map.shape[-2:])} but neighborhoods were built "
            f"on a {batch.grid_size} grid"
        )
    bsz = feature_map.shape[0]
    index = batch.index
    if index.shape[0] != bsz:
        if index.shape[0] != 1:
            raise ShapeError(f"query batch size {index.shape[0]} does not match feature batch {bsz}")
        index = index.expand(bsz, -1, -1)
    flat = feature_map.flatten(2).transpose(1, 2)  # (B, h*w, C)
    b = torch.arange(bsz, device=feature_map.device).view(bsz, 1, 1)
    return flat[b, index]


Decoder = Callable[..., torch.Tensor]


def local_ensemble_query(feature_map: torch.Tensor, batch: QueryBatch, decode: Decoder) -> torch.Tensor:
    """Area-weighted ensemble ``sum_q w_q * decode(z_q, offset(p, q))``.

    ``decode`` receives ``(B, N, 4, C)`` features and ``(B, N, 4, 2)`` offsets
    (plus the scaled ``(B, N, 4, 2)`` cell footprint when the batch carries
    one) and returns ``(B, N, 4, D)``. Returns ``(B, N, D)``.
    """
    feats = gather_cells(feature_map, batch)
    bsz = feats.shape[0]
    offsets = batch.offsets.to(feats.dtype)
    weights = batch.weights.to(feats.dtype)
    if offsets.shape[0] != bsz:
        offsets = offsets.expand(bsz, *offsets.shape[1:])
        weights = weights.expand(bsz, *weights.shape[1:])
    if batch.cell is None:
        decoded = decode(feats, offsets)
    else:
        h, w = batch.grid_size
        scale = torch.tensor([h, w], dtype=feats.dtype, device=feats.device)
        cell = (batch.cell.to(feats.dtype) * scale).unsqueeze(-2).expand_as(offsets)
        decoded = decode(feats, offsets, cell)
    return (weights.unsqueeze(-1) * decoded).sum(dim=-2)
