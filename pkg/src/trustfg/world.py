"""Occupancy grids, signed distance fields and the obstacle hinge factor.

Grid convention: ``cells[i, j]`` covers ``x in origin_x + [j, j+1) * cell_size``
and ``y in origin_y + [i, i+1) * cell_size``; row 0 is the bottom row.  SDF
values live at cell centers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .graph import Factor, NoiseModel, VarKey

logger = logging.getLogger(__name__)


class WorldError(ValueError):
    pass


class DegenerateMapError(WorldError):
    pass


class SDFBoundsError(WorldError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray
    cell_size: float
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise WorldError("occupancy grid must be a non-empty 2D array")
        if not self.cell_size > 0:
            raise WorldError("cell_size must be positive")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        h, w = self.cells.shape
        x0, y0 = self.origin
        return x0, y0, x0 + w * self.cell_size, y0 + h * self.cell_size

    def contains(self, p) -> bool:
        x0, y0, x1, y1 = self.extent
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1

    def is_occupied(self, p) -> bool:
        j = int(np.floor((p[0] - self.origin[0]) / self.cell_size))
        i = int(np.floor((p[1] - self.origin[1]) / self.cell_size))
        h, w = self.cells.shape
        if not (0 <= i < h and 0 <= j < w):
            return True
        return bool(self.cells[i, j])

    @classmethod
    def from_rectangles(cls, width: float, height: float, cell_size: float, origin, rectangles) -> "OccupancyGrid":
        """Rasterize axis-aligned boxes ``(xmin, ymin, xmax, ymax)``; a cell is
        occupied when its center falls inside a box."""
        w = int(round(width / cell_size))
        h = int(round(height / cell_size))
        origin = np.asarray(origin, dtype=float)
        xc = origin[0] + (np.arange(w) + 0.5) * cell_size
        yc = origin[1] + (np.arange(h) + 0.5) * cell_size
        X, Y = np.meshgrid(xc, yc)
        cells = np.zeros((h, w), dtype=bool)
        for xmin, ymin, xmax, ymax in rectangles:
            cells |= (X >= xmin) & (X <= xmax) & (Y >= ymin) & (Y <= ymax)
        return cls(origin, cell_size, cells)


def parse_grid(text: str) -> OccupancyGrid:
    """Parse the plain-text map format.

    First line: ``width height cell_size origin_x origin_y``; then ``height``
    rows of ``width`` 0/1 characters, top row first.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise WorldError("empty grid file")
    head = lines[0].split()
    if len(head) != 5:
        raise WorldError("grid header must be 'width height cell_size origin_x origin_y'")
    try:
        w, h = int(head[0]), int(head[1])
        cell, ox, oy = float(head[2]), float(head[3]), float(head[4])
    except ValueError as exc:
        raise WorldError(f"bad grid header: {exc}") from None
    rows = lines[1:]
    if len(rows) != h:
        raise WorldError(f"expected {h} grid rows, found {len(rows)}")
    cells = np.zeros((h, w), dtype=bool)
    for r, row in enumerate(rows):
        if len(row) != w or set(row) - {"0", "1"}:
            raise WorldError(f"grid row {r + 1} must be {w} characters of 0/1")
        cells[h - 1 - r] = [c == "1" for c in row]
    return OccupancyGrid((ox, oy), cell, cells)


def format_grid(grid: OccupancyGrid) -> str:
    h, w = grid.cells.shape
    head = f"{w} {h} {float(grid.cell_size)!r} {float(grid.origin[0])!r} {float(grid.origin[1])!r}"
    rows = ["".join("1" if c else "0" for c in grid.cells[i]) for i in range(h - 1, -1, -1)]
    return "\n".join([head, *rows]) + "\n"


def load_grid(path) -> OccupancyGrid:
    return parse_grid(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class GridSDF:
    origin: np.ndarray
    cell_size: float
    distances: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.distances.shape


def build_sdf(grid: OccupancyGrid) -> GridSDF:
    """Signed distance between cell centers.

    Free cells hold the distance to the nearest occupied cell center, occupied
    cells the negated distance to the nearest free cell center.
    """
    occ = grid.cells
    if occ.all():
        raise DegenerateMapError("occupancy grid has no free cells")
    h, w = occ.shape
    cs = grid.cell_size
    if not occ.any():
        dist = np.full((h, w), float(np.hypot(h * cs, w * cs)))
        return GridSDF(grid.origin.copy(), cs, dist)
    ii, jj = np.indices((h, w))

    def nearest(mask_zero_targets):
        # index of the nearest cell where the input is zero
        _, (ni, nj) = ndimage.distance_transform_edt(mask_zero_targets, return_indices=True)
        # integer squared offsets keep ties between equally near cells exact
        return cs * np.sqrt((ii - ni) ** 2 + (jj - nj) ** 2)

    outside = nearest(~occ)  # free cells -> nearest occupied
    inside = nearest(occ)  # occupied cells -> nearest free
    dist = np.where(occ, -inside, outside)
    return GridSDF(grid.origin.copy(), cs, dist)


def sdf_query(sdf: GridSDF, p, margin: float | None = None) -> tuple[float, np.ndarray]:
    """Bilinear SDF value and its analytic gradient at ``p``.

    Points outside the lattice of cell centers are clamped onto it (zero
    gradient along the clamped axis).  Points further than ``margin`` outside
    the grid raise ``SDFBoundsError``; the default margin is one cell.
    """
    h, w = sdf.distances.shape
    cs = sdf.cell_size
    u = (p[0] - sdf.origin[0]) / cs - 0.5
    v = (p[1] - sdf.origin[1]) / cs - 0.5
    lim = (margin if margin is not None else cs) / cs + 0.5
    if not (-lim <= u <= w - 1 + lim and -lim <= v <= h - 1 + lim):
        raise SDFBoundsError(f"query point ({p[0]:.4g}, {p[1]:.4g}) lies outside the map")
    gu = gv = 1.0
    if u < 0 or u > w - 1:
        logger.debug("clamping SDF query x=%g", p[0])
        u = min(max(u, 0.0), w - 1.0)
        gu = 0.0
    if v < 0 or v > h - 1:
        logger.debug("clamping SDF query y=%g", p[1])
        v = min(max(v, 0.0), h - 1.0)
        gv = 0.0
    j0 = min(int(np.floor(u)), max(w - 2, 0))
    i0 = min(int(np.floor(v)), max(h - 2, 0))
    j1 = min(j0 + 1, w - 1)
    i1 = min(i0 + 1, h - 1)
    fu = u - j0
    fv = v - i0
    D = sdf.distances
    d00, d01, d10, d11 = D[i0, j0], D[i0, j1], D[i1, j0], D[i1, j1]
    d = (1 - fv) * ((1 - fu) * d00 + fu * d01) + fv * ((1 - fu) * d10 + fu * d11)
    ddu = (1 - fv) * (d01 - d00) + fv * (d11 - d10)
    ddv = (1 - fu) * (d10 - d00) + fu * (d11 - d01)
    grad = np.array([gu * ddu / cs, gv * ddv / cs])
    return float(d), grad


def sdf_query_batch(sdf: GridSDF, P, margin: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``sdf_query`` over the rows of ``P``; same clamping rules."""
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    h, w = sdf.distances.shape
    cs = sdf.cell_size
    u = (P[:, 0] - sdf.origin[0]) / cs - 0.5
    v = (P[:, 1] - sdf.origin[1]) / cs - 0.5
    lim = (margin if margin is not None else cs) / cs + 0.5
    outside = ~((-lim <= u) & (u <= w - 1 + lim) & (-lim <= v) & (v <= h - 1 + lim))
    if outside.any():
        p = P[np.argmax(outside)]
        raise SDFBoundsError(f"query point ({p[0]:.4g}, {p[1]:.4g}) lies outside the map")
    gu = ((u >= 0) & (u <= w - 1)).astype(float)
    gv = ((v >= 0) & (v <= h - 1)).astype(float)
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
    i0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fu = u - j0
    fv = v - i0
    D = sdf.distances
    d00, d01, d10, d11 = D[i0, j0], D[i0, j1], D[i1, j0], D[i1, j1]
    d = (1 - fv) * ((1 - fu) * d00 + fu * d01) + fv * ((1 - fu) * d10 + fu * d11)
    ddu = (1 - fv) * (d01 - d00) + fv * (d11 - d10)
    ddv = (1 - fu) * (d10 - d00) + fu * (d11 - d01)
    return d, np.stack([gu * ddu / cs, gv * ddv / cs], axis=1)


def obstacle_hinge(d: float, eps: float) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return eps - d if d <= eps else 0.0


@dataclass(frozen=True)
class RobotShape:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")


class ObstacleFactor(Factor):
    """Hinge on the clearance between a disc robot and the nearest obstacle."""

    kind = "obstacle"

    def __init__(self, key: VarKey, sdf: GridSDF, radius: float, eps: float, sigma: float):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.sdf = sdf
        self.radius = radius
        self.eps = eps
        super().__init__([key], NoiseModel.isotropic(sigma, 1))

    def clearance(self, x) -> tuple[float, np.ndarray]:
        d, g = sdf_query(self.sdf, x[:2])
        return d - self.radius, g

    def residual(self, xs):
        c, _ = self.clearance(xs[0])
        return np.array([obstacle_hinge(c, self.eps)])

    def jacobians(self, xs):
        c, g = self.clearance(xs[0])
        J = np.zeros((1, xs[0].shape[0]))
        if c < self.eps:
            J[0, :2] = -g
        return [J]

    @classmethod
    def prepare_batch(cls, factors):
        sdf = factors[0].sdf
        if any(f.sdf is not sdf for f in factors):
            return factors
        return sdf, np.array([f.radius for f in factors]), np.array([f.eps for f in factors])

    @classmethod
    def evaluate_batch(cls, ctx, xs, jacobians=True):
        if isinstance(ctx, list):
            return super().evaluate_batch(ctx, xs, jacobians)
        sdf, radius, eps = ctx
        x = xs[0]
        d, g = sdf_query_batch(sdf, x[:, :2])
        c = d - radius
        r = np.where(c <= eps, eps - c, 0.0)[:, None]
        if not jacobians:
            return r, None
        J = np.zeros((x.shape[0], 1, x.shape[1]))
        J[:, 0, :2] = np.where((c < eps)[:, None], -g, 0.0)
        return r, [J]


def make_obstacle_factors(traj, sdf: GridSDF, shape: RobotShape, eps: float = 0.1, sigma: float = 0.05) -> list:
    return [ObstacleFactor(k, sdf, shape.radius, eps, sigma) for k in traj.keys()]
