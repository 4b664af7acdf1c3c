"""Band operators over finite metric spaces.

A BandOperator is an immutable sparse real matrix indexed by the points of a
Space (row x, column y). Norms for p in {1, inf, 0} are exact column/row
absolute sums; p in (1, inf) is only estimated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, TypedDict, Union

import numpy as np
import scipy.sparse as sp

from errors import ExpressionEvaluationError, OperatorError
from logging_config import get_logger
from services.coefficient_service import CoefficientSource
from services.expression_service import CoefficientExpression
from services.space_service import Space, SupportSet

logger = get_logger("bdo_tool")

Coefficient = Union[str, float, int, CoefficientExpression]


class NormRegime(str, Enum):
    """The l^p regimes with closed-form operator norms."""

    P1 = "p1"
    PINF = "pinf"
    P0 = "p0"

    @property
    def uses_rows(self) -> bool:
        """pinf and p0 norms are max row sums; p1 is the max column sum."""
        return self is not NormRegime.P1

    @property
    def dual(self) -> "NormRegime":
        return NormRegime.PINF if self is NormRegime.P1 else NormRegime.P1


class PClassDefect(TypedDict):
    """Norms of the masked matrices measuring P-compactness."""

    aq: float
    qa: float
    pq: float | None
    qp: float | None


class PNormEstimate(TypedDict):
    """Truncation-sampling estimate of an l^p norm, p in (1, inf)."""

    value: float
    p: float
    method: str
    windows: list[int]


class BandOperator:
    """Sparse real X-by-X matrix with finite propagation."""

    def __init__(
        self,
        space: Space,
        matrix,
        source: CoefficientSource | None = None,
        label: str = "",
        notes: Sequence[str] = (),
    ) -> None:
        matrix = sp.csr_matrix(matrix, dtype=np.float64)
        if matrix.shape != (space.size, space.size):
            raise OperatorError(f"Matrix shape {matrix.shape} does not match space of size {space.size}")
        matrix.sum_duplicates()
        matrix.eliminate_zeros()
        matrix.sort_indices()
        self._matrix = matrix
        self.space = space
        self.source = source
        self.label = label
        self.notes = tuple(notes)
        self._propagation = None

    def __repr__(self) -> str:
        name = self.label or "BandOperator"
        return f"{name}(n={self.space.size}, nnz={self.nnz}, prop={self.propagation})"

    @property
    def matrix(self) -> sp.csr_matrix:
        """The CSR matrix; treat as read-only."""
        return self._matrix

    @property
    def nnz(self) -> int:
        return int(self._matrix.nnz)

    @property
    def propagation(self):
        """Exact max d(x, y) over nonzero entries, 0 for the zero operator."""
        if self._propagation is None:
            coo = self._matrix.tocoo()
            if coo.nnz == 0:
                self._propagation = 0
            else:
                self._propagation = self.space.distances[coo.row, coo.col].max()
        return self._propagation

    @property
    def sup_entry(self) -> float:
        return float(np.abs(self._matrix.data).max()) if self.nnz else 0.0

    @property
    def is_diagonal(self) -> bool:
        coo = self._matrix.tocoo()
        return bool(np.all(coo.row == coo.col))

    def to_dense(self) -> np.ndarray:
        return self._matrix.toarray()

    def entry(self, x: int, y: int) -> float:
        return float(self._matrix[x, y])

    def with_label(self, label: str) -> "BandOperator":
        return BandOperator(self.space, self._matrix, self.source, label, self.notes)

    # -- algebra -----------------------------------------------------------

    def __add__(self, other: "BandOperator") -> "BandOperator":
        _check_same_space(self, other)
        source = self.source + other.source if self.source and other.source else None
        return BandOperator(self.space, self._matrix + other._matrix, source)

    def __sub__(self, other: "BandOperator") -> "BandOperator":
        _check_same_space(self, other)
        source = self.source - other.source if self.source and other.source else None
        return BandOperator(self.space, self._matrix - other._matrix, source)

    def __neg__(self) -> "BandOperator":
        return self * -1.0

    def __mul__(self, factor: float) -> "BandOperator":
        if not isinstance(factor, (int, float, np.floating, np.integer)):
            return NotImplemented
        source = self.source.scaled(float(factor)) if self.source else None
        return BandOperator(self.space, self._matrix * float(factor), source)

    __rmul__ = __mul__

    def __matmul__(self, other: "BandOperator") -> "BandOperator":
        return multiply(self, other)

    @property
    def T(self) -> "BandOperator":
        return adjoint(self)


def _check_same_space(a: BandOperator, b: BandOperator) -> None:
    if a.space is not b.space:
        raise OperatorError("Operators live on different spaces")


def _as_expression(coefficient: Coefficient) -> CoefficientExpression:
    if isinstance(coefficient, CoefficientExpression):
        return coefficient
    if isinstance(coefficient, (int, float)):
        return CoefficientExpression(repr(float(coefficient)))
    return CoefficientExpression(str(coefficient))


# -- construction ----------------------------------------------------------

def band_from_source(space: Space, source: CoefficientSource, label: str = "") -> BandOperator:
    """
    Compress a symbolic source to a grid window: A[x + k, x] = a_k(x).

    Offsets that leave the window entirely are skipped and recorded in the
    operator's notes.
    """
    if not space.is_grid:
        raise OperatorError("Offset-defined operators need a grid window")
    if source.dim != space.dim:
        raise OperatorError(f"Source dimension {source.dim} does not match window dimension {space.dim}")

    coords = space.coords
    rows, cols, vals = [], [], []
    notes = []
    for term in source.terms:
        targets = space.lookup(coords + np.asarray(term.offset))
        keep = np.flatnonzero(targets >= 0)
        if keep.size == 0:
            message = f"offset {list(term.offset)} leaves the window entirely; term skipped"
            logger.warning(message)
            notes.append(message)
            continue
        try:
            values = np.asarray(term.function(coords[keep]), dtype=np.float64)
        except ExpressionEvaluationError as e:
            point = coords[keep[e.point_index]] if e.point_index is not None else None
            raise ExpressionEvaluationError(
                f"Coefficient {term.description!r} of offset {list(term.offset)} failed at point "
                f"{None if point is None else point.tolist()}: {e}",
                e.position,
                None if e.point_index is None else int(keep[e.point_index]),
            ) from e
        rows.append(targets[keep])
        cols.append(keep)
        vals.append(values)

    n = space.size
    if rows:
        matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
    else:
        matrix = sp.csr_matrix((n, n))
    return BandOperator(space, matrix, source=source, label=label, notes=notes)


def band_from_offsets(
    space: Space,
    terms: Sequence[tuple[Sequence[int], Coefficient]],
    label: str = "",
) -> BandOperator:
    """
    Build A with A[x + k, x] = a_k(x) on a grid window.

    Args:
        space: grid window
        terms: (offset vector k, coefficient expression a_k) pairs
        label: name used in reports

    Raises:
        ExpressionSyntaxError / ExpressionEvaluationError: with source location
        OperatorError: explicit-table space or dimension mismatch
    """
    if not space.is_grid:
        raise OperatorError("Offset-defined operators need a grid window")
    parsed = []
    for offset, coefficient in terms:
        if len(offset) != space.dim:
            raise OperatorError(f"Offset {list(offset)} does not have dimension {space.dim}")
        parsed.append((tuple(int(k) for k in offset), _as_expression(coefficient)))
    source = CoefficientSource.from_expressions(space.dim, parsed)
    return band_from_source(space, source, label)


def identity(space: Space) -> BandOperator:
    source = CoefficientSource.from_constants(space.dim, {(0,) * space.dim: 1.0}) if space.is_grid else None
    return BandOperator(space, sp.identity(space.size, format="csr"), source, "I")


def zero_operator(space: Space) -> BandOperator:
    source = CoefficientSource(space.dim, []) if space.is_grid else None
    return BandOperator(space, sp.csr_matrix((space.size, space.size)), source, "0")


def diagonal(space: Space, values: np.ndarray, label: str = "") -> BandOperator:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (space.size,):
        raise OperatorError(f"Diagonal needs {space.size} values, got {values.shape}")
    return BandOperator(space, sp.diags(values, format="csr"), label=label)


def shift_operator(space: Space, offset: Sequence[int]) -> BandOperator:
    """Partial shift on a grid window: (V v)(x + k) = v(x)."""
    return band_from_offsets(space, [(offset, "1")], label=f"shift{list(offset)}")


def from_dense(space: Space, array: np.ndarray, label: str = "") -> BandOperator:
    return BandOperator(space, sp.csr_matrix(np.asarray(array, dtype=np.float64)), label=label)


def projection(support: SupportSet) -> BandOperator:
    """P_F, the multiplication by the indicator of F."""
    return BandOperator(support.space, sp.diags(support.mask.astype(np.float64), format="csr"), label="P_F")


def coprojection(support: SupportSet) -> BandOperator:
    """Q_F = I - P_F."""
    return projection(support.complement()).with_label("Q_F")


def multiply_functions(left: np.ndarray | None, A: BandOperator, right: np.ndarray | None) -> BandOperator:
    """diag(left) * A * diag(right); either side may be omitted."""
    matrix = A.matrix
    if left is not None:
        matrix = sp.diags(np.asarray(left, dtype=np.float64)) @ matrix
    if right is not None:
        matrix = matrix @ sp.diags(np.asarray(right, dtype=np.float64))
    return BandOperator(A.space, matrix)


def multiplication_commutator(phi: np.ndarray, A: BandOperator) -> BandOperator:
    """[phi, A] = phi A - A phi, entries (phi(x) - phi(y)) A[x, y]."""
    phi = np.asarray(phi, dtype=np.float64)
    coo = A.matrix.tocoo()
    data = (phi[coo.row] - phi[coo.col]) * coo.data
    return BandOperator(A.space, sp.coo_matrix((data, (coo.row, coo.col)), shape=coo.shape))


def compress(A: BandOperator, support: SupportSet) -> BandOperator:
    """P_F A P_F."""
    mask = support.mask.astype(np.float64)
    return multiply_functions(mask, A, mask)


# -- operations ------------------------------------------------------------

def apply(A: BandOperator, v: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product (Av)(x) = sum_y A[x, y] v(y)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (A.space.size,):
        raise OperatorError(f"Vector of shape {v.shape} does not match space of size {A.space.size}")
    return A.matrix @ v


def multiply(A: BandOperator, B: BandOperator) -> BandOperator:
    """Matrix product; the symbolic sources compose when both exist."""
    _check_same_space(A, B)
    source = A.source.compose(B.source) if A.source and B.source else None
    return BandOperator(A.space, A.matrix @ B.matrix, source)


def adjoint(A: BandOperator) -> BandOperator:
    """Transpose (the adjoint for real scalar fibers)."""
    source = A.source.adjoint() if A.source else None
    label = f"{A.label}*" if A.label else ""
    return BandOperator(A.space, A.matrix.T.tocsr(), source, label, A.notes)


def _abs_line_sums(matrix: sp.csr_matrix) -> np.ndarray:
    """Compensated absolute sums of the stored lines of a compressed matrix."""
    data = np.abs(matrix.data)
    indptr = matrix.indptr
    return np.array(
        [math.fsum(data[indptr[i]:indptr[i + 1]]) for i in range(len(indptr) - 1)],
        dtype=np.float64,
    )


def row_sums(A: BandOperator) -> np.ndarray:
    return _abs_line_sums(A.matrix)


def column_sums(A: BandOperator) -> np.ndarray:
    return _abs_line_sums(A.matrix.tocsc())


def _matrix_norm(matrix: sp.spmatrix, regime: NormRegime) -> float:
    matrix = sp.csr_matrix(matrix)
    if matrix.nnz == 0:
        return 0.0
    sums = _abs_line_sums(matrix if regime.uses_rows else matrix.tocsc())
    return float(sums.max())


def op_norm(A: BandOperator, regime: NormRegime) -> float:
    """
    Exact operator norm: p1 = max column sum, pinf and p0 = max row sum.

    The p0 value equals pinf because the extension to l^inf preserves norms.
    """
    return _matrix_norm(A.matrix, NormRegime(regime))


def dense_norm(matrix: np.ndarray, regime: NormRegime) -> float:
    """Same formulas for a dense array (used for patch inverses)."""
    matrix = np.abs(np.asarray(matrix, dtype=np.float64))
    if matrix.size == 0:
        return 0.0
    if NormRegime(regime).uses_rows:
        return float(max(math.fsum(row) for row in matrix))
    return float(max(math.fsum(col) for col in matrix.T))


def restricted_norm(A: BandOperator, regime: NormRegime, support: SupportSet) -> float:
    """Norm with rows (pinf/p0) or columns (p1) limited to F."""
    regime = NormRegime(regime)
    mask = support.mask.astype(np.float64)
    matrix = sp.diags(mask) @ A.matrix if regime.uses_rows else A.matrix @ sp.diags(mask)
    return _matrix_norm(matrix, regime)


def propagation(A: BandOperator):
    """Exact max distance over nonzero entries."""
    return A.propagation


def band_norm_bound(A: BandOperator) -> float:
    """sup|A_xy| * max_x #B(x, prop(A)), valid in every regime."""
    return A.sup_entry * A.space.geometry_profile(A.propagation)


# -- decomposition ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecompositionTerm:
    """f_k V_k: multiplier f_k times the partial translation t_k: D_k -> R_k.

    ``domain[j]`` is mapped to ``range[j]``; the term has entries
    ``(range[j], domain[j]) = multiplier[range[j]]``.
    """

    space: Space
    multiplier: np.ndarray
    domain: np.ndarray
    range: np.ndarray
    offset: tuple[int, ...] | None = None

    @property
    def displacement(self):
        if self.domain.size == 0:
            return 0
        return self.space.distances[self.range, self.domain].max()

    @property
    def sup_norm(self) -> float:
        return float(np.abs(self.multiplier).max()) if self.multiplier.size else 0.0

    @property
    def is_injective(self) -> bool:
        return len(set(self.range.tolist())) == self.range.size and len(set(self.domain.tolist())) == self.domain.size

    def translation_operator(self) -> BandOperator:
        """V_k with (V_k v)(x) = v(t_k^{-1} x) on R_k, 0 elsewhere."""
        n = self.space.size
        data = np.ones(self.domain.size)
        return BandOperator(self.space, sp.coo_matrix((data, (self.range, self.domain)), shape=(n, n)))

    def as_operator(self) -> BandOperator:
        n = self.space.size
        data = self.multiplier[self.range]
        return BandOperator(self.space, sp.coo_matrix((data, (self.range, self.domain)), shape=(n, n)))


def _term(space: Space, rows: np.ndarray, cols: np.ndarray, data: np.ndarray, offset=None) -> DecompositionTerm:
    multiplier = np.zeros(space.size)
    multiplier[rows] = data
    return DecompositionTerm(space, multiplier, cols.astype(np.int64), rows.astype(np.int64), offset)


def decompose_band(A: BandOperator) -> list[DecompositionTerm]:
    """
    Write A = sum_k f_k V_k with partial translations V_k.

    On grid windows the terms are the offset classes, so the count is at most
    the number of lattice points in B(0, prop(A)). On explicit tables the
    nonzero pattern is greedily edge-coloured (at most 2N - 1 matchings) and
    colour classes are merged while they stay partial bijections.
    """
    coo = A.matrix.tocoo()
    if coo.nnz == 0:
        return []
    space = A.space

    if space.is_grid:
        offsets = space.coords[coo.row] - space.coords[coo.col]
        unique, inverse = np.unique(offsets, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        terms = []
        for group, offset in enumerate(unique):
            pick = np.flatnonzero(inverse == group)
            terms.append(_term(space, coo.row[pick], coo.col[pick], coo.data[pick], tuple(int(v) for v in offset)))
        return terms

    order = np.lexsort((coo.col, coo.row))
    rows, cols, data = coo.row[order], coo.col[order], coo.data[order]
    row_colors: dict[int, set[int]] = {}
    col_colors: dict[int, set[int]] = {}
    colors = np.empty(rows.size, dtype=np.int64)
    for e, (x, y) in enumerate(zip(rows.tolist(), cols.tolist())):
        used = row_colors.setdefault(x, set()) | col_colors.setdefault(y, set())
        c = 0
        while c in used:
            c += 1
        colors[e] = c
        row_colors[x].add(c)
        col_colors[y].add(c)

    merged: list[tuple[set[int], set[int], list[int]]] = []
    for c in range(int(colors.max()) + 1):
        members = np.flatnonzero(colors == c)
        class_rows, class_cols = set(rows[members].tolist()), set(cols[members].tolist())
        for group_rows, group_cols, group_members in merged:
            if group_rows.isdisjoint(class_rows) and group_cols.isdisjoint(class_cols):
                group_rows |= class_rows
                group_cols |= class_cols
                group_members.extend(members.tolist())
                break
        else:
            merged.append((class_rows, class_cols, members.tolist()))

    return [
        _term(space, rows[idx], cols[idx], data[idx])
        for idx in (np.asarray(sorted(members), dtype=np.int64) for _, _, members in merged)
    ]


def reconstruct(space: Space, terms: Sequence[DecompositionTerm]) -> BandOperator:
    """Sum of f_k V_k."""
    n = space.size
    total = sp.csr_matrix((n, n))
    for term in terms:
        total = total + term.as_operator().matrix
    return BandOperator(space, total)


# -- P-compactness ---------------------------------------------------------

def _masked(A: BandOperator, row_mask: np.ndarray | None, col_mask: np.ndarray | None) -> sp.csr_matrix:
    matrix = A.matrix
    if row_mask is not None:
        matrix = sp.diags(row_mask.astype(np.float64)) @ matrix
    if col_mask is not None:
        matrix = matrix @ sp.diags(col_mask.astype(np.float64))
    return sp.csr_matrix(matrix)


def pclass_defect(
    A: BandOperator,
    F: SupportSet,
    Fprime: SupportSet | None = None,
    regime: NormRegime = NormRegime.PINF,
) -> PClassDefect:
    """Exact ‖A Q_F‖, ‖Q_F A‖ and, with F', ‖P_F' A Q_F‖ and ‖Q_F A P_F'‖."""
    regime = NormRegime(regime)
    outside = ~F.mask
    aq = _matrix_norm(_masked(A, None, outside), regime)
    qa = _matrix_norm(_masked(A, outside, None), regime)
    pq = qp = None
    if Fprime is not None:
        pq = _matrix_norm(_masked(A, Fprime.mask, outside), regime)
        qp = _matrix_norm(_masked(A, outside, Fprime.mask), regime)
    return PClassDefect(aq=aq, qa=qa, pq=pq, qp=qp)


# -- p in (1, inf) ---------------------------------------------------------

def _power_iteration(matrix: np.ndarray, p: float, rng: np.random.Generator, iterations: int, tol: float) -> float:
    """Nonlinear power method for the l^p operator norm of a dense matrix."""
    q = p / (p - 1.0)

    def dual(v: np.ndarray, exponent: float) -> np.ndarray:
        norm = np.linalg.norm(v, exponent)
        if norm == 0:
            return v
        return np.sign(v) * (np.abs(v) / norm) ** (exponent - 1.0)

    best = 0.0
    for _ in range(3):
        x = np.abs(rng.standard_normal(matrix.shape[1])) + 1e-3
        x /= np.linalg.norm(x, p)
        for _ in range(iterations):
            y = matrix @ x
            value = np.linalg.norm(y, p)
            best = max(best, value)
            if value == 0:
                break
            z = matrix.T @ dual(y, p)
            if np.linalg.norm(z, q) <= float(z @ x) + tol:
                break
            x = dual(z, q)
            x /= np.linalg.norm(x, p)
    return float(best)


def estimate_p_norm(
    A: BandOperator,
    p: float,
    rng: np.random.Generator | None = None,
    radii: Sequence[int] | None = None,
    iterations: int = 200,
    tol: float = 1e-12,
) -> PNormEstimate:
    """
    Approximate ‖A‖_p for p in (1, inf) as the sup over nested truncations
    P_F A P_F of a power-iteration estimate. The result is a lower estimate.
    """
    if not 1.0 < p < math.inf:
        raise OperatorError(f"estimate_p_norm needs p in (1, inf), got {p}; use op_norm for p in {{1, inf}}")
    rng = rng or np.random.default_rng(0)
    space = A.space
    if space.is_grid:
        radius = max(space.radius, 0)
        radii = sorted(set(radii)) if radii else sorted({max(radius // 4, 1), max(radius // 2, 1), radius})
        supports = [SupportSet.centered_box(space, r) for r in radii]
        supports.append(SupportSet.whole(space))
        labels = list(radii) + [-1]
    else:
        supports = [SupportSet.whole(space)]
        labels = [-1]

    best = 0.0
    for support in supports:
        idx = support.indices
        if idx.size == 0:
            continue
        block = A.matrix[idx][:, idx].toarray()
        best = max(best, _power_iteration(block, p, rng, iterations, tol))
    return PNormEstimate(value=best, p=float(p), method="approximate", windows=labels)


# -- interchange -----------------------------------------------------------

def export_coo_csv(A: BandOperator, path: Path | str) -> Path:
    """Write ``row-id, col-id, value`` lines (17 significant digits)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = A.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "col", "value"])
        for e in order:
            writer.writerow([A.space.point_id(coo.row[e]), A.space.point_id(coo.col[e]), f"{coo.data[e]:.17g}"])
    return path


def import_coo_csv(space: Space, path: Path | str, label: str = "") -> BandOperator:
    """Read a coordinate-list CSV written by :func:`export_coo_csv`."""
    rows, cols, vals = [], [], []
    seen: set[tuple[int, int]] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for line_no, row in enumerate(reader, start=1):
            if not row or (line_no == 1 and row[0] == "row"):
                continue
            if len(row) != 3:
                raise OperatorError(f"{path}:{line_no}: expected 3 columns, got {len(row)}")
            x = space.parse_point_id(row[0].strip())
            y = space.parse_point_id(row[1].strip())
            if (x, y) in seen:
                raise OperatorError(f"{path}:{line_no}: duplicate entry for ({row[0]}, {row[1]})")
            seen.add((x, y))
            try:
                vals.append(float(row[2]))
            except ValueError:
                raise OperatorError(f"{path}:{line_no}: malformed value {row[2]!r}") from None
            rows.append(x)
            cols.append(y)
    n = space.size
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)) if vals else sp.csr_matrix((n, n))
    return BandOperator(space, matrix, label=label)
