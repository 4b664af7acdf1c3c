"""Finite metric spaces: explicit distance tables and windows of Z^N.

Distances are kept exactly (integers on grids, Fractions on tables) so that
propagation and radius comparisons never depend on float thresholds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Real
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from errors import SpaceError
from logging_config import get_logger

logger = get_logger("bdo_tool")

SpaceKind = Literal["explicit-table", "grid-window"]
MetricKind = Literal["l1", "linf", "table"]
GRID_METRICS = {"l1": "cityblock", "linf": "chebyshev"}


def _exact(value) -> Fraction:
    """Convert a distance-like value to an exact rational."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise SpaceError(f"Distance must be finite, got {value}")
        return Fraction(float(value))
    if isinstance(value, Real):
        return Fraction(value)
    raise SpaceError(f"Unsupported distance value: {value!r}")


class Space:
    """A finite, strongly discrete metric space.

    Use :func:`make_grid_space`, :func:`make_table_space` or
    :func:`load_distance_table` instead of calling the constructor directly.
    """

    def __init__(
        self,
        points: Sequence,
        distances: np.ndarray,
        kind: SpaceKind,
        metric_kind: MetricKind,
        coords: np.ndarray | None = None,
        lo: Sequence[int] | None = None,
        hi: Sequence[int] | None = None,
    ) -> None:
        self._points = tuple(points)
        self._index = {p: i for i, p in enumerate(self._points)}
        self._distances = distances
        self._distances.flags.writeable = False
        self.kind: SpaceKind = kind
        self.metric_kind: MetricKind = metric_kind
        self._coords = coords
        if coords is not None:
            self._coords.flags.writeable = False
        self.lo = tuple(int(v) for v in lo) if lo is not None else None
        self.hi = tuple(int(v) for v in hi) if hi is not None else None
        self._float_distances: np.ndarray | None = None
        self._profile_cache: dict[Fraction, int] = {}

    # -- basic structure -------------------------------------------------

    @property
    def points(self) -> tuple:
        """Point identifiers in index order."""
        return self._points

    @property
    def size(self) -> int:
        return len(self._points)

    def __len__(self) -> int:
        return len(self._points)

    def __repr__(self) -> str:
        if self.is_grid:
            return f"Space(grid {self.metric_kind}, lo={self.lo}, hi={self.hi})"
        return f"Space(table, {self.size} points)"

    @property
    def is_grid(self) -> bool:
        return self.kind == "grid-window"

    @property
    def dim(self) -> int | None:
        return len(self.lo) if self.is_grid else None

    @property
    def shape(self) -> tuple[int, ...] | None:
        if not self.is_grid:
            return None
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def coords(self) -> np.ndarray:
        """Integer coordinates (n, dim) of a grid window."""
        if self._coords is None:
            raise SpaceError("Explicit-table spaces have no ambient coordinates")
        return self._coords

    @property
    def radius(self) -> int:
        """Largest centered radius that fits the window on every axis."""
        if not self.is_grid:
            raise SpaceError("Only grid windows have a radius")
        return min((h - l) // 2 for l, h in zip(self.lo, self.hi))

    def index_of(self, point) -> int:
        """Index of a point identifier."""
        key = tuple(int(v) for v in point) if self.is_grid else point
        try:
            return self._index[key]
        except KeyError:
            raise SpaceError(f"Point {point!r} is not in {self!r}") from None

    def point_id(self, index: int) -> str:
        """Printable identifier used in CSV interchange."""
        point = self._points[index]
        if self.is_grid:
            return ":".join(str(v) for v in point)
        return str(point)

    def parse_point_id(self, text: str) -> int:
        """Inverse of :meth:`point_id`."""
        if self.is_grid:
            try:
                return self.index_of(tuple(int(v) for v in text.split(":")))
            except ValueError:
                raise SpaceError(f"Malformed grid point id: {text!r}") from None
        return self.index_of(text)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Indices of grid coordinates, -1 where they fall outside the window."""
        if not self.is_grid:
            raise SpaceError("Coordinate lookup needs a grid window")
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        inside = np.all((coords >= lo) & (coords <= hi), axis=1)
        result = np.full(coords.shape[0], -1, dtype=np.int64)
        if inside.any():
            result[inside] = np.ravel_multi_index(tuple((coords[inside] - lo).T), self.shape)
        return result

    # -- metric ---------------------------------------------------------

    @property
    def distances(self) -> np.ndarray:
        """Exact distance table (int64 on grids, Fraction objects on tables)."""
        return self._distances

    @property
    def float_distances(self) -> np.ndarray:
        """Float view of the distance table, cached."""
        if self._float_distances is None:
            self._float_distances = np.asarray(self._distances, dtype=np.float64)
            self._float_distances.flags.writeable = False
        return self._float_distances

    def distance(self, i: int, j: int):
        """Exact distance between two point indices."""
        return self._distances[i, j]

    def within(self, r) -> np.ndarray:
        """Boolean matrix of pairs with d(x, y) <= r."""
        if self.is_grid:
            return self._distances <= math.floor(_exact(r))
        bound = _exact(r)
        return np.vectorize(lambda d: d <= bound, otypes=[bool])(self._distances)

    def ball(self, index: int, r) -> np.ndarray:
        """Indices of the closed ball B(x, r)."""
        row = self._distances[index]
        if self.is_grid:
            return np.flatnonzero(row <= math.floor(_exact(r)))
        bound = _exact(r)
        return np.array([j for j, d in enumerate(row) if d <= bound], dtype=np.int64)

    def distance_to_set(self, indices: np.ndarray) -> np.ndarray:
        """Float distance from every point to a nonempty index set."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            return np.full(self.size, np.inf)
        return self.float_distances[:, indices].min(axis=1)

    def neighborhood(self, indices: np.ndarray, r) -> np.ndarray:
        """Indices of the closed r-neighborhood of a set."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            return indices
        return np.flatnonzero(self.within(r)[:, indices].any(axis=1))

    def diameter(self, indices: Iterable[int] | None = None):
        """Exact diameter of a subset (0 for empty or singleton sets)."""
        idx = np.arange(self.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
        if idx.size <= 1:
            return 0
        return self._distances[np.ix_(idx, idx)].max()

    @property
    def attained_distances(self) -> list:
        """Sorted distinct distances; finite by strong discreteness."""
        values = sorted(set(self._distances.ravel().tolist()))
        if not values:
            raise SpaceError("Empty space has no distances")
        return values

    def geometry_profile(self, r) -> int:
        """max_x #B(x, r), cached per radius."""
        key = _exact(r)
        if key < 0:
            raise SpaceError(f"Radius must be nonnegative, got {r}")
        if key not in self._profile_cache:
            self._profile_cache[key] = int(self.within(key).sum(axis=1).max())
        return self._profile_cache[key]

    def audit_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Pairs (i, j), i < j, on which Lipschitz audits are run.

        Grid metrics are geodesic with unit steps, so a function is L-Lipschitz
        iff it is L-Lipschitz on pairs at distance 1. Tables are audited on all
        pairs.
        """
        if self.is_grid:
            rows, cols = np.nonzero(self._distances == 1)
        else:
            rows, cols = np.nonzero(~np.eye(self.size, dtype=bool))
        keep = rows < cols
        return rows[keep], cols[keep]

    def assert_metric_axioms(self) -> None:
        """Check identity, symmetry and the triangle inequality on all triples."""
        table = self._distances
        n = self.size
        if table.shape != (n, n):
            raise SpaceError(f"Distance table must be {n}x{n}, got {table.shape}")
        for i in range(n):
            for j in range(n):
                d = table[i, j]
                if d < 0:
                    raise SpaceError(f"Negative distance between {self._points[i]!r} and {self._points[j]!r}")
                if (d == 0) != (i == j):
                    raise SpaceError(
                        f"d({self._points[i]!r}, {self._points[j]!r}) = {d} violates d(x,y)=0 iff x=y"
                    )
                if d != table[j, i]:
                    raise SpaceError(f"Distance table is not symmetric at ({self._points[i]!r}, {self._points[j]!r})")
        for k in range(n):
            via_k = table[:, k:k + 1] + table[k:k + 1, :]
            violated = np.argwhere(table > via_k)
            if violated.size:
                i, j = violated[0]
                raise SpaceError(
                    f"Triangle inequality fails: d({self._points[i]!r}, {self._points[j]!r}) > "
                    f"d(., {self._points[k]!r}) + d({self._points[k]!r}, .)"
                )
        # strong discreteness: finitely many attained distances
        if len(self.attained_distances) > n * n:
            raise SpaceError("Attained distance set is not finite")


@dataclass(frozen=True, eq=False)
class SupportSet:
    """A subset F of a space, stored as a read-only boolean mask."""

    space: Space
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.space.size,):
            raise SpaceError(f"Support mask must have length {self.space.size}, got {mask.shape}")
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_indices(cls, space: Space, indices: Iterable[int]) -> "SupportSet":
        mask = np.zeros(space.size, dtype=bool)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= space.size):
            raise SpaceError("Support indices out of range")
        mask[idx] = True
        return cls(space, mask)

    @classmethod
    def from_points(cls, space: Space, points: Iterable) -> "SupportSet":
        return cls.from_indices(space, [space.index_of(p) for p in points])

    @classmethod
    def whole(cls, space: Space) -> "SupportSet":
        return cls(space, np.ones(space.size, dtype=bool))

    @classmethod
    def box(cls, space: Space, lo: Sequence[int], hi: Sequence[int]) -> "SupportSet":
        """Grid points with lo <= x <= hi componentwise."""
        coords = space.coords
        inside = np.all((coords >= np.asarray(lo)) & (coords <= np.asarray(hi)), axis=1)
        return cls(space, inside)

    @classmethod
    def centered_box(cls, space: Space, radius: int) -> "SupportSet":
        dim = space.dim
        return cls.box(space, [-radius] * dim, [radius] * dim)

    @classmethod
    def interior(cls, space: Space, margin: int) -> "SupportSet":
        """Grid points at least `margin` steps inside every face of the window."""
        return cls.box(space, [l + margin for l in space.lo], [h - margin for h in space.hi])

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def __len__(self) -> int:
        return self.size

    def __contains__(self, index: int) -> bool:
        return bool(self.mask[index])

    def complement(self) -> "SupportSet":
        return SupportSet(self.space, ~self.mask)

    def union(self, other: "SupportSet") -> "SupportSet":
        self._check_same_space(other)
        return SupportSet(self.space, self.mask | other.mask)

    def issubset(self, other: "SupportSet") -> bool:
        self._check_same_space(other)
        return bool(np.all(~self.mask | other.mask))

    def diameter(self):
        return self.space.diameter(self.indices)

    def _check_same_space(self, other: "SupportSet") -> None:
        if other.space is not self.space:
            raise SpaceError("Support sets live on different spaces")


def make_grid_space(
    dim: int,
    lo: Sequence[int],
    hi: Sequence[int],
    metric_kind: Literal["l1", "linf"] = "l1",
) -> Space:
    """
    Build the window {x in Z^dim : lo <= x <= hi} with a grid metric.

    Raises:
        SpaceError: on dimension mismatch, empty window or unknown metric.
    """
    if dim < 1:
        raise SpaceError(f"Dimension must be positive, got {dim}")
    if len(lo) != dim or len(hi) != dim:
        raise SpaceError(f"Dimension mismatch: dim={dim}, lo has {len(lo)}, hi has {len(hi)} components")
    if any(l > h for l, h in zip(lo, hi)):
        raise SpaceError(f"Empty window: lo={list(lo)} is not <= hi={list(hi)}")
    if metric_kind not in ("l1", "linf"):
        raise SpaceError(f"Unknown grid metric {metric_kind!r}; expected 'l1' or 'linf'")

    shape = tuple(int(h) - int(l) + 1 for l, h in zip(lo, hi))
    coords = np.indices(shape).reshape(dim, -1).T + np.asarray(lo, dtype=np.int64)
    coords = coords.astype(np.int64)
    # integer coordinates: float distances are exact well below 2**53
    distances = cdist(coords, coords, GRID_METRICS[metric_kind]).astype(np.int64)
    points = [tuple(int(v) for v in row) for row in coords]

    space = Space(points, distances, "grid-window", metric_kind, coords=coords, lo=lo, hi=hi)
    logger.debug(f"Built grid window {space!r} with {space.size} points")
    return space


def make_table_space(labels: Sequence[str], table: Sequence[Sequence]) -> Space:
    """Build an explicit finite metric space and validate every axiom."""
    n = len(labels)
    if n == 0:
        raise SpaceError("Explicit space needs at least one point")
    if len(set(labels)) != n:
        raise SpaceError("Point labels must be unique")
    if len(table) != n or any(len(row) != n for row in table):
        raise SpaceError(f"Distance table must be {n}x{n}")
    distances = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            distances[i, j] = _exact(table[i][j])
    space = Space(labels, distances, "explicit-table", "table")
    space.assert_metric_axioms()
    return space


def load_distance_table(path: Path | str) -> Space:
    """
    Load an explicit space from CSV rows ``point-id, point-id, distance``.

    Diagonal entries may be omitted; every off-diagonal pair must appear in
    at least one orientation, and both orientations must agree.
    """
    entries: dict[tuple[str, str], Fraction] = {}
    labels: list[str] = []
    seen: set[str] = set()
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise SpaceError(f"{path}:{line_no}: expected 3 columns, got {len(row)}")
            a, b, d = (cell.strip() for cell in row)
            try:
                value = _exact(d)
            except (ValueError, ZeroDivisionError):
                raise SpaceError(f"{path}:{line_no}: malformed distance {d!r}") from None
            for label in (a, b):
                if label not in seen:
                    seen.add(label)
                    labels.append(label)
            for key in ((a, b), (b, a)):
                if key in entries and entries[key] != value:
                    raise SpaceError(f"{path}:{line_no}: conflicting distance for {a!r}, {b!r}")
                entries[key] = value

    table = []
    for a in labels:
        row = []
        for b in labels:
            if a == b:
                row.append(entries.get((a, b), Fraction(0)))
            elif (a, b) in entries:
                row.append(entries[(a, b)])
            else:
                raise SpaceError(f"{path}: missing distance between {a!r} and {b!r}")
        table.append(row)
    return make_table_space(labels, table)


def geometry_profile(space: Space, r) -> int:
    """Exact maximum closed-ball cardinality max_x #B(x, r)."""
    return space.geometry_profile(r)
