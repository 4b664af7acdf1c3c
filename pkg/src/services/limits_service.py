"""Limit operators of band operators on Z^N along direction sequences.

Limits are read from an operator's symbolic coefficient source, so tails far
beyond the stored window are evaluable. Richness is only ever certified on
the tested tail.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, TypedDict

import numpy as np
import scipy.sparse as sp

from errors import LimitsError
from logging_config import get_certificate_logger, get_logger
from services.operator_service import BandOperator, NormRegime, apply, band_from_source
from services.space_service import Space, make_grid_space

logger = get_logger("bdo_tool")

LIMIT_WINDOW = 3  # translates averaged into the limit


@dataclass(frozen=True)
class DirectionSequence:
    """A computable path to infinity: a ray m*u or an explicit list of h_m."""

    label: str
    ray: tuple[int, ...] | None = None
    points: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if (self.ray is None) == (self.points is None):
            raise LimitsError(f"Direction {self.label!r} needs exactly one of a ray or explicit points")
        if self.ray is not None:
            if not any(self.ray):
                raise LimitsError(f"Direction {self.label!r}: ray vector must be nonzero")
            return
        if len(self.points) < LIMIT_WINDOW:
            raise LimitsError(f"Direction {self.label!r}: explicit sequence needs at least {LIMIT_WINDOW} points")
        dims = {len(p) for p in self.points}
        if len(dims) != 1:
            raise LimitsError(f"Direction {self.label!r}: points have mixed dimensions {sorted(dims)}")
        norms = [float(np.abs(p).sum()) for p in self.points[-LIMIT_WINDOW:]]
        if any(b <= a for a, b in zip(norms, norms[1:])):
            raise LimitsError(f"Direction {self.label!r}: norms of the final points must strictly increase")

    @classmethod
    def from_ray(cls, vector: Sequence[int], label: str | None = None) -> "DirectionSequence":
        ray = tuple(int(v) for v in vector)
        return cls(label=label or f"ray{list(ray)}", ray=ray)

    @classmethod
    def from_points(cls, points: Sequence[Sequence[int]], label: str) -> "DirectionSequence":
        return cls(label=label, points=tuple(tuple(int(v) for v in p) for p in points))

    @property
    def dim(self) -> int:
        return len(self.ray) if self.ray is not None else len(self.points[0])

    @property
    def length(self) -> int | None:
        """Number of explicit points; None for rays."""
        return None if self.points is None else len(self.points)

    def vector(self, m: int) -> np.ndarray:
        """h_m."""
        if self.ray is not None:
            return m * np.asarray(self.ray, dtype=np.int64)
        if not 0 <= m < len(self.points):
            raise LimitsError(f"Direction {self.label!r} has no point with index {m}")
        return np.asarray(self.points[m], dtype=np.int64)


def coordinate_rays(dim: int) -> list[DirectionSequence]:
    """The 2*dim rays +-e_k."""
    rays = []
    for axis in range(dim):
        for sign, name in ((1, "+"), (-1, "-")):
            e = [0] * dim
            e[axis] = sign
            rays.append(DirectionSequence.from_ray(e, label=f"{name}x{axis}"))
    return rays


@dataclass(frozen=True)
class TailSpec:
    """`samples` geometrically spaced sequence indices in [start, stop]."""

    start: int = 1000
    stop: int = 10000
    samples: int = 8

    def __post_init__(self):
        if self.start < 0 or self.stop <= self.start:
            raise LimitsError(f"Tail needs 0 <= start < stop, got [{self.start}, {self.stop}]")
        if self.samples < LIMIT_WINDOW:
            raise LimitsError(f"Tail needs at least {LIMIT_WINDOW} samples, got {self.samples}")

    def indices(self) -> list[int]:
        lo = max(self.start, 1)
        raw = np.geomspace(lo, self.stop, self.samples) if self.start > 0 else np.concatenate(
            [[0], np.geomspace(1, self.stop, self.samples - 1)]
        )
        values = sorted({int(round(v)) for v in raw} | {self.start, self.stop})
        if len(values) < LIMIT_WINDOW:
            raise LimitsError(f"Tail [{self.start}, {self.stop}] yields fewer than {LIMIT_WINDOW} distinct indices")
        return values


def reference_window(space: Space, rho: int | None = None) -> Space:
    """Centered window [-rho, rho]^dim with the metric of `space`."""
    if not space.is_grid:
        raise LimitsError("Limit operators need a grid window; explicit tables have no translations")
    rho = space.radius if rho is None else int(rho)
    if rho < 0:
        raise LimitsError(f"Reference radius must be nonnegative, got {rho}")
    return make_grid_space(space.dim, [-rho] * space.dim, [rho] * space.dim, space.metric_kind)


def translate(A: BandOperator, h: Sequence[int], refwin: Space | None = None) -> BandOperator:
    """
    V_{-h} A V_h on the reference window: entry (x, y) is A[x + h, y + h].

    Uses the symbolic source when present. Otherwise entries are read from
    the stored matrix, and pairs falling outside it are zero and counted in
    the result's notes.
    """
    space = A.space
    if not space.is_grid:
        raise LimitsError("Translation is unsupported on explicit-table spaces")
    refwin = refwin or reference_window(space)
    if refwin.dim != space.dim:
        raise LimitsError(f"Reference window dimension {refwin.dim} does not match {space.dim}")
    h = np.asarray(h, dtype=np.int64)
    if h.shape != (space.dim,):
        raise LimitsError(f"Translation vector must have {space.dim} components")

    if A.source is not None:
        return band_from_source(refwin, A.source.shifted(h), label=A.label)

    targets = space.lookup(refwin.coords + h)
    inside = np.flatnonzero(targets >= 0)
    block = A.matrix[targets[inside]][:, targets[inside]].tocoo()
    n = refwin.size
    matrix = sp.coo_matrix((block.data, (inside[block.row], inside[block.col])), shape=(n, n))
    notes = []
    if inside.size < n:
        notes.append(f"{n - inside.size} reference points fall outside the stored window; their entries are 0")
    return BandOperator(refwin, matrix, label=A.label, notes=notes)


@dataclass(frozen=True, eq=False)
class LimitOperatorResult:
    """Limit operator on a reference window plus its richness evidence."""

    operator: BandOperator
    rich: bool
    cauchy_residual: float
    direction: str
    tail: tuple[int, ...]
    source_label: str = ""
    tol: float = 1e-6
    notes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def provenance(self) -> dict:
        return {"source": self.source_label, "direction": self.direction, "tail": list(self.tail)}


def _tail_values(A: BandOperator, refwin: Space, direction: DirectionSequence, tail: Sequence[int]):
    """Entry pattern on refwin and the (len(tail), nnz) array of translated values."""
    coords = refwin.coords
    rows, cols, offsets = [], [], []
    for term in A.source.terms:
        targets = refwin.lookup(coords + np.asarray(term.offset))
        keep = np.flatnonzero(targets >= 0)
        if keep.size == 0:
            continue
        rows.append(targets[keep])
        cols.append(keep)
        offsets.append((term, keep))
    values = np.empty((len(tail), sum(k.size for _, k in offsets)))
    for t, m in enumerate(tail):
        h = direction.vector(m)
        chunks = [np.asarray(term.function(coords[keep] + h), dtype=np.float64) for term, keep in offsets]
        values[t] = np.concatenate(chunks) if chunks else np.zeros(0)
    pattern = (
        np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
        np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64),
    )
    return pattern, values


def limit_operator(
    A: BandOperator,
    direction: DirectionSequence,
    tail: TailSpec | Sequence[int] | None = None,
    tol: float = 1e-6,
    refwin: Space | None = None,
) -> LimitOperatorResult:
    """
    Entrywise limit of the translates of A along `direction`.

    The limit is the mean of the last three tested translates; the Cauchy
    residual is the largest entry oscillation (max - min) over the whole
    tested tail, and the result is rich iff the residual is within tol.
    A non-rich result is returned, never raised.

    Raises:
        LimitsError: no symbolic source, explicit-table space, bad tail.
    """
    if not A.space.is_grid:
        raise LimitsError("Limit operators need a grid window")
    if A.source is None:
        raise LimitsError(
            f"Operator {A.label or '<unnamed>'} has no symbolic coefficient source; "
            "build it from offsets to take limits"
        )
    if direction.dim != A.space.dim:
        raise LimitsError(f"Direction {direction.label!r} has dimension {direction.dim}, space has {A.space.dim}")
    if isinstance(tail, TailSpec):
        indices = tail.indices()
    elif tail is None:
        indices = TailSpec().indices() if direction.length is None else list(
            range(max(direction.length - 8, 0), direction.length)
        )
    else:
        indices = sorted({int(m) for m in tail})
    if len(indices) < LIMIT_WINDOW:
        raise LimitsError(f"Tail needs at least {LIMIT_WINDOW} indices, got {len(indices)}")
    refwin = refwin or reference_window(A.space)

    (rows, cols), values = _tail_values(A, refwin, direction, indices)
    residual = float((values.max(axis=0) - values.min(axis=0)).max()) if values.shape[1] else 0.0
    limit = values[-LIMIT_WINDOW:].mean(axis=0)
    n = refwin.size
    operator = BandOperator(
        refwin,
        sp.coo_matrix((limit, (rows, cols)), shape=(n, n)),
        label=f"Phi[{direction.label}]({A.label})" if A.label else f"Phi[{direction.label}]",
    )
    rich = residual <= tol
    get_certificate_logger().limit_extracted(direction.label, indices, residual, rich)
    if not rich:
        logger.info(f"Direction {direction.label}: tail oscillation {residual:.3g} exceeds tol {tol:.3g}; not rich")
    return LimitOperatorResult(
        operator=operator,
        rich=rich,
        cauchy_residual=residual,
        direction=direction.label,
        tail=tuple(indices),
        source_label=A.label,
        tol=tol,
    )


@dataclass(frozen=True)
class SpectrumSample:
    """Per-direction results, the distinct limit operators among them, and the aggregate flag."""

    results: tuple[LimitOperatorResult, ...]
    members: tuple[LimitOperatorResult, ...]
    rich: bool

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def _same_operator(a: BandOperator, b: BandOperator, tol: float) -> bool:
    diff = (a.matrix - b.matrix).tocoo()
    return diff.nnz == 0 or float(np.abs(diff.data).max()) <= tol


def spectrum_sample(
    A: BandOperator,
    directions: Sequence[DirectionSequence],
    tol: float = 1e-6,
    refwin: Space | None = None,
    tail: TailSpec | None = None,
    threads: int = 1,
) -> SpectrumSample:
    """Limit operators along every direction, deduplicated within tol."""
    if not directions:
        raise LimitsError("spectrum_sample needs at least one direction")
    refwin = refwin or reference_window(A.space)
    ordered = sorted(directions, key=lambda d: d.label)

    def run(direction: DirectionSequence) -> LimitOperatorResult:
        return limit_operator(A, direction, tail, tol, refwin)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = tuple(pool.map(run, ordered))
    else:
        results = tuple(run(d) for d in ordered)

    members: list[LimitOperatorResult] = []
    for result in results:
        if not any(_same_operator(result.operator, m.operator, tol) for m in members):
            members.append(result)
    return SpectrumSample(results=results, members=tuple(members), rich=all(r.rich for r in results))


class NormGap(TypedDict):
    index: int
    translated_norm: float
    limit_norm: float
    gap: float


def _vector_norm(v: np.ndarray, regime: NormRegime) -> float:
    if NormRegime(regime) is NormRegime.P1:
        return math.fsum(np.abs(v))
    return float(np.abs(v).max(initial=0.0))


def norm_approximation_gaps(
    A: BandOperator,
    result: LimitOperatorResult,
    v: np.ndarray,
    direction: DirectionSequence,
    tail: Sequence[int],
    regime: NormRegime = NormRegime.PINF,
) -> list[NormGap]:
    """
    |‖A w_m‖ - ‖Phi(A) v‖| for the copies w_m = V_{h_m} v of a finitely
    supported unit v on the reference window.

    A w_m is evaluated from the symbolic source as (V_{-h_m} A V_{h_m}) v, so
    the copies may lie far beyond the stored window.
    """
    refwin = result.operator.space
    v = np.asarray(v, dtype=np.float64)
    norm_v = _vector_norm(v, regime)
    if norm_v == 0:
        raise LimitsError("Test vector must be nonzero")
    v = v / norm_v
    # margin keeps A v's support inside the reference window
    margin = int(math.ceil(float(A.propagation)))
    support = refwin.coords[np.flatnonzero(v)]
    if support.size and (support.min() < -refwin.radius + margin or support.max() > refwin.radius - margin):
        raise LimitsError(f"Test vector must be supported at least {margin} steps inside the reference window")
    limit_norm = _vector_norm(apply(result.operator, v), regime)
    gaps = []
    for m in tail:
        translated = translate(A, direction.vector(m), refwin)
        value = _vector_norm(apply(translated, v), regime)
        gaps.append(NormGap(index=int(m), translated_norm=value, limit_norm=limit_norm, gap=abs(value - limit_norm)))
    return gaps
