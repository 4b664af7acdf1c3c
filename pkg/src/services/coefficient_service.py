"""Symbolic coefficient sources for band operators on Z^N.

A source describes a bi-infinite band operator through its offset
coefficient functions, ``A[x + k, x] = a_k(x)``. Window matrices are
compressions of the source; the source itself is what translation and limit
extraction read, so it is carried through sums, products and adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from errors import ExpressionError, OperatorError
from services.expression_service import CoefficientExpression

Offset = tuple[int, ...]
CoefficientFn = Callable[[np.ndarray], np.ndarray]

# Probe coordinates for translation-invariance checks
_SAMPLE_VALUES = (0, 1, -1, 7, -13, 250, -250, 10**4, -(10**4), 10**6)


@dataclass(frozen=True)
class CoefficientTerm:
    """One offset of a source: A[x + offset, x] = function(x)."""

    offset: Offset
    function: CoefficientFn
    description: str


def _constant(value: float) -> CoefficientFn:
    def fn(coords: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(coords).shape[0], value, dtype=np.float64)
    return fn


def _shift(fn: CoefficientFn, h: np.ndarray) -> CoefficientFn:
    def shifted(coords: np.ndarray) -> np.ndarray:
        return fn(np.atleast_2d(coords) + h)
    return shifted


def _product(left: CoefficientFn, right: CoefficientFn) -> CoefficientFn:
    def fn(coords: np.ndarray) -> np.ndarray:
        return left(coords) * right(coords)
    return fn


def _sum(fns: Sequence[CoefficientFn]) -> CoefficientFn:
    def fn(coords: np.ndarray) -> np.ndarray:
        total = fns[0](coords)
        for other in fns[1:]:
            total = total + other(coords)
        return total
    return fn


def _scaled(fn: CoefficientFn, factor: float) -> CoefficientFn:
    def scaled(coords: np.ndarray) -> np.ndarray:
        return factor * fn(coords)
    return scaled


def _format_offset(offset: Offset) -> str:
    return "(" + ",".join(str(k) for k in offset) + ")"


class CoefficientSource:
    """Offset -> coefficient function map of a bi-infinite band operator."""

    def __init__(self, dim: int, terms: Iterable[CoefficientTerm]):
        self.dim = dim
        grouped: dict[Offset, list[CoefficientTerm]] = {}
        for term in terms:
            if len(term.offset) != dim:
                raise OperatorError(f"Offset {term.offset} does not have dimension {dim}")
            grouped.setdefault(tuple(int(k) for k in term.offset), []).append(term)
        self._terms: dict[Offset, CoefficientTerm] = {}
        for offset in sorted(grouped):
            group = grouped[offset]
            if len(group) == 1:
                self._terms[offset] = group[0]
            else:
                self._terms[offset] = CoefficientTerm(
                    offset,
                    _sum([t.function for t in group]),
                    " + ".join(f"({t.description})" for t in group),
                )

    @classmethod
    def from_expressions(cls, dim: int, terms: Sequence[tuple[Sequence[int], CoefficientExpression]]) -> "CoefficientSource":
        return cls(dim, [
            CoefficientTerm(tuple(int(k) for k in offset), expr.evaluate, expr.source)
            for offset, expr in terms
        ])

    @classmethod
    def from_constants(cls, dim: int, coefficients: Mapping[Offset, float]) -> "CoefficientSource":
        return cls(dim, [
            CoefficientTerm(tuple(offset), _constant(float(c)), repr(float(c)))
            for offset, c in coefficients.items()
        ])

    @property
    def offsets(self) -> list[Offset]:
        return list(self._terms)

    @property
    def terms(self) -> list[CoefficientTerm]:
        return list(self._terms.values())

    def describe(self) -> dict[str, str]:
        """Offset -> human-readable coefficient, for reports."""
        return {_format_offset(k): t.description for k, t in self._terms.items()}

    def evaluate(self, offset: Offset, coords: np.ndarray) -> np.ndarray:
        term = self._terms.get(tuple(offset))
        coords = np.atleast_2d(coords)
        if term is None:
            return np.zeros(coords.shape[0])
        return np.asarray(term.function(coords), dtype=np.float64)

    # -- algebra -----------------------------------------------------------

    def shifted(self, h: Sequence[int]) -> "CoefficientSource":
        """Source of V_{-h} A V_h: coefficients a_k(x + h)."""
        vec = np.asarray(h, dtype=np.int64)
        return CoefficientSource(self.dim, [
            CoefficientTerm(k, _shift(t.function, vec), f"{t.description} @ x+{_format_offset(tuple(vec))}")
            for k, t in self._terms.items()
        ])

    def scaled(self, factor: float) -> "CoefficientSource":
        return CoefficientSource(self.dim, [
            CoefficientTerm(k, _scaled(t.function, factor), f"{factor!r}*({t.description})")
            for k, t in self._terms.items()
        ])

    def __add__(self, other: "CoefficientSource") -> "CoefficientSource":
        self._check_dim(other)
        return CoefficientSource(self.dim, self.terms + other.terms)

    def __sub__(self, other: "CoefficientSource") -> "CoefficientSource":
        return self + other.scaled(-1.0)

    def compose(self, other: "CoefficientSource") -> "CoefficientSource":
        """Source of the product self * other.

        (AB)[x + k, x] = sum over k1 + k2 = k of a_{k1}(x + k2) * b_{k2}(x).
        """
        self._check_dim(other)
        terms = []
        for k1, a in self._terms.items():
            for k2, b in other._terms.items():
                k = tuple(p + q for p, q in zip(k1, k2))
                shift = np.asarray(k2, dtype=np.int64)
                terms.append(CoefficientTerm(
                    k,
                    _product(_shift(a.function, shift), b.function),
                    f"({a.description})@x+{_format_offset(k2)} * ({b.description})",
                ))
        return CoefficientSource(self.dim, terms)

    def adjoint(self) -> "CoefficientSource":
        """Source of the transpose: c_k(x) = a_{-k}(x + k)."""
        terms = []
        for k, t in self._terms.items():
            neg = tuple(-v for v in k)
            terms.append(CoefficientTerm(
                neg,
                _shift(t.function, np.asarray(neg, dtype=np.int64)),
                f"({t.description})@x+{_format_offset(neg)}",
            ))
        return CoefficientSource(self.dim, terms)

    # -- translation invariance -------------------------------------------

    def sample_coordinates(self) -> np.ndarray:
        """Deterministic spread of far and near coordinates."""
        values = np.asarray(_SAMPLE_VALUES, dtype=np.int64)
        rows = [np.roll(values, axis) for axis in range(self.dim)]
        return np.stack(rows, axis=1)

    def constant_coefficients(self, tol: float = 1e-12) -> dict[Offset, float] | None:
        """Offset -> constant value, or None if some coefficient varies by > tol."""
        samples = self.sample_coordinates()
        constants: dict[Offset, float] = {}
        for k in self._terms:
            try:
                values = self.evaluate(k, samples)
            except ExpressionError:
                return None
            if float(values.max() - values.min()) > tol:
                return None
            constants[k] = float(values.mean())
        return constants

    def _check_dim(self, other: "CoefficientSource") -> None:
        if other.dim != self.dim:
            raise OperatorError(f"Sources have different dimensions ({self.dim} vs {other.dim})")
