"""Fixed-radius, cap-limited near-neighbor search over 3-D point sets.

A uniform grid hash serves indexed queries; a brute-force scan over all
targets is kept as the oracle mode. Both compute per-pair distances with
identical arithmetic, so their results match element for element. Within
a radius the nearest `cap` targets are kept, ties broken by smaller
target index; the boundary is inclusive (distance == radius counts).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ShapeError


def as_points(points) -> np.ndarray:
    """Validate and copy an (n, 3) coordinate array in float64."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"point sets are (n, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidArgumentError("point coordinates must be finite")
    return arr.copy()


@dataclass(frozen=True)
class Scale:
    """One (radius, cap) pair of a multi-scale ball-query schedule."""

    radius: float
    cap: int

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgumentError(f"scale radius must be > 0, got {self.radius}")
        if self.cap < 1:
            raise InvalidArgumentError(f"scale cap must be >= 1, got {self.cap}")


@dataclass(frozen=True)
class MultiScaleSchedule:
    """Ordered list of scales; order is preserved as configured."""

    scales: tuple[Scale, ...]

    def __post_init__(self):
        if len(self.scales) < 1:
            raise InvalidArgumentError("schedule needs at least one scale")

    @classmethod
    def of(cls, pairs) -> "MultiScaleSchedule":
        return cls(tuple(Scale(float(r), int(k)) for r, k in pairs))

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def truncated(self, n_scales: int) -> "MultiScaleSchedule":
        if not (1 <= n_scales <= len(self.scales)):
            raise InvalidArgumentError(f"cannot keep {n_scales} of {len(self.scales)} scales")
        return MultiScaleSchedule(self.scales[:n_scales])


@dataclass
class NeighborList:
    """Per-query neighbors: target indices, offsets (target - query), distances.

    Lists are sorted ascending by (distance, target index) and hold at most
    `cap` entries each; empty neighborhoods are empty arrays.
    """

    indices: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    radius: float = 0.0
    cap: int = 0

    @property
    def n_queries(self) -> int:
        return len(self.indices)

    def counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices], dtype=np.int64)

    def equals(self, other: "NeighborList") -> bool:
        if self.n_queries != other.n_queries:
            return False
        for a, b in zip(self.indices, other.indices):
            if len(a) != len(b) or not np.array_equal(a, b):
                return False
        for a, b in zip(self.distances, other.distances):
            if not np.array_equal(a, b):
                return False
        return True


class SpatialIndex:
    """Uniform-grid hash over a target point set; immutable after build."""

    def __init__(self, points: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise InvalidArgumentError(f"cell_size must be > 0, got {cell_size}")
        self.points = as_points(points)
        self.cell_size = float(cell_size)
        self._cells: dict[tuple[int, int, int], np.ndarray] = {}
        if len(self.points):
            keys = np.floor(self.points / self.cell_size).astype(np.int64)
            order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
            sorted_keys = keys[order]
            boundaries = np.nonzero((sorted_keys[1:] != sorted_keys[:-1]).any(axis=1))[0] + 1
            for chunk in np.split(order, boundaries):
                k = tuple(keys[chunk[0]])
                self._cells[k] = np.sort(chunk)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def candidates(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Indices of all targets in grid cells overlapping the query ball."""
        lo = np.floor((query - radius) / self.cell_size).astype(np.int64)
        hi = np.floor((query + radius) / self.cell_size).astype(np.int64)
        chunks = []
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                for cz in range(lo[2], hi[2] + 1):
                    cell = self._cells.get((cx, cy, cz))
                    if cell is not None:
                        chunks.append(cell)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)


def build_index(targets, cell_size: float) -> SpatialIndex:
    """Build a uniform-grid index; queries return exact radius-ball contents."""
    return SpatialIndex(as_points(targets), cell_size)


def _select(points: np.ndarray, cand: np.ndarray, query: np.ndarray, radius: float, cap: int):
    """Filter candidates to the ball, order by (distance, index), apply cap."""
    if len(cand) == 0:
        return (
            np.empty(0, dtype=np.int64),
            np.empty((0, 3), dtype=np.float64),
            np.empty(0, dtype=np.float64),
        )
    delta = points[cand] - query
    dist = np.sqrt((delta * delta).sum(axis=1))
    keep = dist <= radius
    cand, delta, dist = cand[keep], delta[keep], dist[keep]
    order = np.lexsort((cand, dist))[:cap]
    return cand[order], delta[order], dist[order]


def ball_query(index: SpatialIndex, queries, radius: float, cap: int, mode: str = "indexed") -> NeighborList:
    """Up to `cap` nearest targets within `radius` of each query point.

    `brute` mode scans every target and is the reference the grid path is
    tested against; empty results are valid, not errors.
    """
    if radius <= 0:
        raise InvalidArgumentError(f"radius must be > 0, got {radius}")
    if cap < 1:
        raise InvalidArgumentError(f"cap must be >= 1, got {cap}")
    if mode not in ("indexed", "brute"):
        raise InvalidArgumentError(f"unknown query mode {mode!r}")
    q = as_points(queries)
    out = NeighborList(radius=radius, cap=cap)
    all_idx = np.arange(index.n_points, dtype=np.int64)
    for row in q:
        cand = all_idx if mode == "brute" else index.candidates(row, radius)
        idx, off, dist = _select(index.points, cand, row, radius, cap)
        out.indices.append(idx)
        out.offsets.append(off)
        out.distances.append(dist)
    return out


def query_all_scales(index: SpatialIndex, queries, schedule: MultiScaleSchedule, mode: str = "indexed") -> list[NeighborList]:
    """One NeighborList per scale, each as ball_query would produce."""
    q = as_points(queries)
    return [ball_query(index, q, s.radius, s.cap, mode=mode) for s in schedule]
