"""Commutators with bounded functions and the quasi-locality modulus.

For real entries the supremum of ‖[A, f]‖ over L-Lipschitz f with |f| <= 1
has the closed form

    pinf/p0:  max_x sum_y |A_xy| * min(L*d(x, y), 2)
    p1:       max_y sum_x |A_xy| * min(L*d(x, y), 2)

and is attained by f*(z) = min(L*d(z, x*), 2) - 1 at the maximizing line x*.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypedDict

import numpy as np
import scipy.sparse as sp

from errors import InvariantViolation, OperatorError
from logging_config import get_certificate_logger, get_logger
from services.operator_service import BandOperator, NormRegime, op_norm
from services.space_service import Space

logger = get_logger("bdo_tool")

LIPSCHITZ_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class LipschitzFunction:
    """f: X -> [-1, 1] with a declared (audited) Lipschitz constant."""

    space: Space
    values: np.ndarray
    lipschitz_constant: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.space.size,):
            raise OperatorError(f"Function needs {self.space.size} values, got {values.shape}")
        if np.abs(values).max(initial=0.0) > 1 + LIPSCHITZ_SLACK:
            raise OperatorError("Function leaves the unit ball")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def audit(self) -> float:
        """Measured max |f(x) - f(y)| / d(x, y) over the space's audit pairs."""
        rows, cols = self.space.audit_pairs()
        if rows.size == 0:
            return 0.0
        ratio = np.abs(self.values[rows] - self.values[cols]) / self.space.float_distances[rows, cols]
        return float(ratio.max())

    def verify(self) -> None:
        measured = self.audit()
        if measured > self.lipschitz_constant * (1 + 1e-9) + LIPSCHITZ_SLACK:
            raise InvariantViolation(
                f"Function is {measured:.6g}-Lipschitz, declared {self.lipschitz_constant:.6g}"
            )


def _values(A: BandOperator, f) -> np.ndarray:
    values = f.values if isinstance(f, LipschitzFunction) else np.asarray(f, dtype=np.float64)
    if values.shape != (A.space.size,):
        raise OperatorError(f"Function has {values.shape} values, operator space has {A.space.size} points")
    return values


def commutator(A: BandOperator, f) -> BandOperator:
    """[A, f] = Af - fA with entries A_xy * (f(y) - f(x))."""
    values = _values(A, f)
    coo = A.matrix.tocoo()
    data = coo.data * (values[coo.col] - values[coo.row])
    return BandOperator(A.space, sp.coo_matrix((data, (coo.row, coo.col)), shape=coo.shape))


def _weighted_line_sums(A: BandOperator, L: float, regime: NormRegime) -> np.ndarray:
    coo = A.matrix.tocoo()
    n = A.space.size
    if coo.nnz == 0:
        return np.zeros(n)
    weights = np.minimum(L * A.space.float_distances[coo.row, coo.col], 2.0)
    line = coo.row if NormRegime(regime).uses_rows else coo.col
    weighted = np.abs(coo.data) * weights
    order = np.argsort(line, kind="stable")
    line, weighted = line[order], weighted[order]
    starts = np.searchsorted(line, np.arange(n + 1))
    return np.array([math.fsum(weighted[starts[x]:starts[x + 1]]) for x in range(n)])


def ql_modulus(A: BandOperator, L: float, regime: NormRegime) -> float:
    """sup ‖[A, f]‖ over L-Lipschitz f with |f| <= 1, in closed form."""
    if L < 0:
        raise OperatorError(f"L must be nonnegative, got {L}")
    return float(_weighted_line_sums(A, L, regime).max(initial=0.0))


def extremizer(A: BandOperator, L: float, regime: NormRegime) -> tuple[LipschitzFunction, int]:
    """f*(z) = min(L*d(z, x*), 2) - 1 at the maximizing row (column for p1)."""
    sums = _weighted_line_sums(A, L, regime)
    x_star = int(np.argmax(sums))
    values = np.minimum(L * A.space.float_distances[x_star], 2.0) - 1.0
    return LipschitzFunction(A.space, values, L), x_star


class CommutatorCertificate(TypedDict):
    L: float
    eps: float
    r: float
    M: float
    N: int
    modulus: float
    sentinel: bool


def band_commutator_certificate(A: BandOperator, eps: float, regime: NormRegime) -> CommutatorCertificate:
    """
    L = eps / (r*M*N) such that ‖[A, f]‖ <= eps for every L-Lipschitz unit f.

    A diagonal operator (r = 0) commutes with every multiplication; the
    certificate then returns L = inf and flags it as a sentinel.
    """
    if not eps > 0:
        raise OperatorError(f"eps must be positive, got {eps}")
    regime = NormRegime(regime)
    r = float(A.propagation)
    M = op_norm(A, regime)
    N = A.space.geometry_profile(A.propagation)
    if r == 0 or M == 0:
        cert = CommutatorCertificate(L=math.inf, eps=eps, r=r, M=M, N=N, modulus=0.0, sentinel=True)
        get_certificate_logger().quasilocal_certificate(eps, math.inf, r, M, N, 0.0)
        return cert
    L = eps / (r * M * N)
    modulus = ql_modulus(A, L, regime)
    get_certificate_logger().quasilocal_certificate(eps, L, r, M, N, modulus)
    if modulus > eps * (1 + 1e-9):
        raise InvariantViolation(f"ql_modulus {modulus:.12g} exceeds eps={eps:.12g} at L={L:.6g}")
    return CommutatorCertificate(L=L, eps=eps, r=r, M=M, N=N, modulus=modulus, sentinel=False)


def ql_curve(A: BandOperator, Ls: Sequence[float], regime: NormRegime) -> list[tuple[float, float]]:
    """(L, ql_modulus) pairs, sorted by L."""
    return [(float(L), ql_modulus(A, L, regime)) for L in sorted(Ls)]


def export_ql_curve_csv(curve: Sequence[tuple[float, float]], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["L", "modulus"])
        for L, value in curve:
            writer.writerow([f"{L:.12g}", f"{value:.12g}"])
    return path


def sample_lipschitz_function(space: Space, L: float, rng: np.random.Generator, anchors: int = 4) -> LipschitzFunction:
    """
    Random L-Lipschitz function in the unit ball.

    Values are drawn at a few anchor points, extended by the McShane formula
    min_a (f(a) + L*d(x, a)), and clamped to [-1, 1] (clamping keeps the
    Lipschitz constant).
    """
    count = min(anchors, space.size)
    chosen = rng.choice(space.size, size=count, replace=False)
    raw = rng.uniform(-1.0, 1.0, size=count)
    distances = space.float_distances[chosen]
    # anchor values must themselves be L-Lipschitz for the extension to interpolate them
    anchor_values = (raw[:, None] + L * distances[:, chosen]).min(axis=0)
    extended = (anchor_values[:, None] + L * distances).min(axis=0)
    return LipschitzFunction(space, np.clip(extended, -1.0, 1.0), L)


class ParametrixQuasilocality(TypedDict):
    L: float
    operator_modulus: float
    parametrix_modulus: float
    operator_norm: float
    parametrix_norm: float


def parametrix_quasilocality(A: BandOperator, B: BandOperator, L: float, regime: NormRegime) -> ParametrixQuasilocality:
    """ql_modulus of an operator and of its parametrix, side by side."""
    return ParametrixQuasilocality(
        L=float(L),
        operator_modulus=ql_modulus(A, L, regime),
        parametrix_modulus=ql_modulus(B, L, regime),
        operator_norm=op_norm(A, regime),
        parametrix_norm=op_norm(B, regime),
    )
