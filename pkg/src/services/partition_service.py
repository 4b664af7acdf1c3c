"""Metric partitions of unity, Lipschitz dual families and block assembly.

Families are stored as dense (m, n) arrays: row i holds phi_i (or psi_i)
evaluated at every point. Every sum over the index set is an exact finite
sum taken in index order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal, Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

from errors import InvariantViolation, PartitionError
from logging_config import get_certificate_logger, get_logger
from services.operator_service import (
    BandOperator,
    NormRegime,
    multiplication_commutator,
    op_norm,
)
from services.space_service import Space

logger = get_logger("bdo_tool")

Side = Literal["right", "left"]
Certificate = Literal["variation", "lipschitz"]
Blocks = Union[Sequence[BandOperator | None], Mapping[int, BandOperator]]

SUM_TOL = 1e-12
BOUND_SLACK = 1e-9


class PartitionOfUnity:
    """phi_1..phi_m with values in [0, 1] summing to 1 at every point."""

    def __init__(
        self,
        space: Space,
        values: np.ndarray,
        r: float | None = None,
        eps: float | None = None,
        width: int | None = None,
    ) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != space.size:
            raise PartitionError(f"Partition values must have shape (m, {space.size}), got {values.shape}")
        if values.shape[0] == 0:
            raise PartitionError("Partition needs at least one function")
        if values.min() < -SUM_TOL or values.max() > 1 + SUM_TOL:
            raise PartitionError("Partition functions must take values in [0, 1]")
        values = np.clip(values, 0.0, 1.0)
        totals = values.sum(axis=0)
        if np.any(totals <= 0):
            raise PartitionError("Partition functions vanish simultaneously at some point")
        values = values / totals
        drift = float(np.abs(values.sum(axis=0) - 1.0).max())
        if drift > SUM_TOL:
            raise InvariantViolation(f"Partition sums drift from 1 by {drift:.3e} (allowed {SUM_TOL})")
        values.flags.writeable = False
        self.space = space
        self.values = values
        self.r = r
        self.eps = eps
        self.width = width

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"PartitionOfUnity(m={len(self)}, multiplicity={self.multiplicity}, width={self.width})"

    @cached_property
    def supports(self) -> list[np.ndarray]:
        return [np.flatnonzero(row > 0) for row in self.values]

    @cached_property
    def multiplicity(self) -> int:
        return int((self.values > 0).sum(axis=0).max())

    @cached_property
    def support_diameter(self):
        return max(self.space.diameter(s) for s in self.supports)

    @cached_property
    def measured_variation(self) -> float | None:
        """Variation at the certified scale r, re-measured by a pair scan."""
        return None if self.r is None else variation(self, self.r)


class DualFamily:
    """psi_i = 1 on supp phi_i, L-Lipschitz, supported in the 1/L halo."""

    def __init__(self, partition: PartitionOfUnity, values: np.ndarray, lipschitz_constant: float) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != partition.values.shape:
            raise PartitionError(
                f"Dual family shape {values.shape} does not match partition shape {partition.values.shape}"
            )
        values.flags.writeable = False
        self.partition = partition
        self.space = partition.space
        self.values = values
        self.lipschitz_constant = float(lipschitz_constant)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def halo(self) -> float:
        return 1.0 / self.lipschitz_constant

    @cached_property
    def supports(self) -> list[np.ndarray]:
        return [np.flatnonzero(row > 0) for row in self.values]

    @cached_property
    def audited_ratio(self) -> float:
        """max |psi_i(x) - psi_i(y)| / d(x, y) over the audit pairs."""
        rows, cols = self.space.audit_pairs()
        if rows.size == 0:
            return 0.0
        d = self.space.float_distances[rows, cols]
        jumps = np.abs(self.values[:, rows] - self.values[:, cols]).max(axis=0)
        return float((jumps / d).max())

    def verify(self) -> None:
        """Re-check the three dual-family invariants."""
        phi = self.partition.values
        if np.any(self.values[phi > 0] != 1.0):
            raise InvariantViolation("Dual function is not identically 1 on the support of its partner")
        if self.audited_ratio > self.lipschitz_constant * (1 + BOUND_SLACK):
            raise InvariantViolation(
                f"Dual family Lipschitz ratio {self.audited_ratio:.6g} exceeds declared L={self.lipschitz_constant:.6g}"
            )
        for i, support in enumerate(self.partition.supports):
            reach = self.space.distance_to_set(support)[self.supports[i]]
            if reach.size and reach.max() > self.halo * (1 + BOUND_SLACK):
                raise InvariantViolation(f"supp psi_{i} leaves the {self.halo:.6g}-halo of supp phi_{i}")


# -- construction ----------------------------------------------------------

def _tents(lo: int, hi: int, width: int) -> np.ndarray:
    """Overlapping tents max(0, 1 - |x - c|/S) with centers lo, lo + S, ..."""
    points = np.arange(lo, hi + 1)
    count = math.ceil((hi - lo) / width) + 1
    centers = lo + width * np.arange(count)
    return np.maximum(0.0, 1.0 - np.abs(points[None, :] - centers[:, None]) / width)


def _grid_partition(space: Space, r: float, eps: float) -> PartitionOfUnity:
    width = math.ceil(2 * r * space.dim / eps)
    shortest = min(space.shape)
    if shortest < width:
        raise PartitionError(
            f"Window too small for an ({r}, {eps})-variation tent partition: "
            f"each axis needs at least {width} points, shortest axis has {shortest}"
        )
    values = np.ones((1, 1))
    for lo, hi in zip(space.lo, space.hi):
        tents = _tents(lo, hi, width)
        m, n = values.shape
        values = (values[:, None, :, None] * tents[None, :, None, :]).reshape(m * tents.shape[0], n * tents.shape[1])
    values = values[values.max(axis=1) > 0]
    return PartitionOfUnity(space, values, r=r, eps=eps, width=width)


def _net(space: Space, scale: float) -> list[int]:
    """Greedy maximal scale-separated set, scanned in index order."""
    distances = space.float_distances
    centers: list[int] = []
    for x in range(space.size):
        if not centers or distances[x, centers].min() > scale:
            centers.append(x)
    return centers


def _table_partition(space: Space, r: float, eps: float) -> PartitionOfUnity:
    distances = space.float_distances
    for scale in (float(d) for d in space.attained_distances if d > 0):
        centers = _net(space, scale)
        weights = np.maximum(0.0, 2 * scale - distances[centers, :])
        candidate = PartitionOfUnity(space, weights / weights.sum(axis=0), r=r, eps=eps)
        if variation(candidate, r) <= eps:
            logger.debug(f"Table partition accepted at scale {scale} with {len(centers)} centers")
            return candidate
    return constant_partition(space, r, eps)


def constant_partition(space: Space, r: float | None = None, eps: float | None = None) -> PartitionOfUnity:
    """The one-element partition phi = 1 (variation 0)."""
    return PartitionOfUnity(space, np.ones((1, space.size)), r=r, eps=eps)


def cube_partition(space: Space, side: int) -> PartitionOfUnity:
    """Indicators of the disjoint cubes lo + side*j + [0, side)^dim."""
    if not space.is_grid:
        raise PartitionError("Cube partitions need a grid window")
    cells = (space.coords - np.asarray(space.lo)) // side
    _, labels = np.unique(cells, axis=0, return_inverse=True)
    labels = np.asarray(labels).ravel()
    values = np.zeros((labels.max() + 1, space.size))
    values[labels, np.arange(space.size)] = 1.0
    return PartitionOfUnity(space, values)


def build_partition(space: Space, r: float, eps: float) -> PartitionOfUnity:
    """
    Construct a partition of unity with (r, eps)-variation.

    Grid windows get tensored tents of width S = ceil(2*r*dim/eps); explicit
    tables get a distance-weighted net partition at the smallest scale that
    passes. eps >= 2 returns the constant partition. The variation is always
    re-measured and certified before returning.

    Raises:
        PartitionError: bad parameters or a window shorter than S.
        InvariantViolation: the measured variation exceeds eps.
    """
    if r <= 0:
        raise PartitionError(f"r must be positive, got {r}")
    if not 0 < eps:
        raise PartitionError(f"eps must be positive, got {eps}")
    if eps >= 2:
        pou = constant_partition(space, r, eps)
    elif space.is_grid:
        pou = _grid_partition(space, r, eps)
    else:
        pou = _table_partition(space, r, eps)

    measured = pou.measured_variation
    if measured > eps * (1 + BOUND_SLACK):
        raise InvariantViolation(f"Partition variation {measured:.6g} exceeds eps={eps:.6g} at r={r}")
    get_certificate_logger().partition_certified(
        float(r), float(eps), measured, pou.width, pou.multiplicity, float(pou.support_diameter)
    )
    return pou


def variation(pou: PartitionOfUnity, r: float) -> float:
    """max over pairs d(x, y) <= r of sum_i |phi_i(x) - phi_i(y)|."""
    within = np.triu(pou.space.within(r), k=1)
    rows, cols = np.nonzero(within)
    if rows.size == 0:
        return 0.0
    best = 0.0
    # chunked to bound the (m, pairs) temporary
    chunk = max(1, 2_000_000 // len(pou))
    for start in range(0, rows.size, chunk):
        r_idx, c_idx = rows[start:start + chunk], cols[start:start + chunk]
        diffs = np.abs(pou.values[:, r_idx] - pou.values[:, c_idx]).sum(axis=0)
        best = max(best, float(diffs.max()))
    return best


def build_dual_family(pou: PartitionOfUnity, L: float) -> DualFamily:
    """psi_i(x) = max(0, 1 - L * d(x, supp phi_i)); halo 1/L, audited."""
    if not L > 0:
        raise PartitionError(f"Lipschitz constant must be positive, got {L}")
    values = np.empty_like(pou.values)
    for i, support in enumerate(pou.supports):
        values[i] = np.maximum(0.0, 1.0 - L * pou.space.distance_to_set(support))
    dual = DualFamily(pou, values, L)
    dual.verify()
    get_certificate_logger().dual_certified(dual.lipschitz_constant, dual.halo, dual.audited_ratio)
    return dual


# -- assembly --------------------------------------------------------------

def _block_list(blocks: Blocks, count: int, skip: set[int]) -> list[BandOperator | None]:
    if isinstance(blocks, Mapping):
        missing = sorted(set(range(count)) - set(blocks) - skip)
        if missing or any(not 0 <= i < count for i in blocks):
            raise PartitionError(f"Block indices do not match the partition index set (missing {missing[:5]})")
        return [None if i in skip else blocks.get(i) for i in range(count)]
    blocks = list(blocks)
    if len(blocks) != count:
        raise PartitionError(f"Got {len(blocks)} blocks for a partition with {count} functions")
    for i, block in enumerate(blocks):
        if block is None and i not in skip:
            raise PartitionError(f"Block {i} is missing and not skipped")
    return [None if i in skip else b for i, b in enumerate(blocks)]


def _check_family(pou: PartitionOfUnity, dual: DualFamily) -> None:
    if dual.partition is not pou or len(dual) != len(pou):
        raise PartitionError("Dual family does not belong to this partition")


def _regime_sides(pou: PartitionOfUnity, dual: DualFamily, regime: NormRegime) -> tuple[np.ndarray, np.ndarray]:
    """(left multipliers, right multipliers): (phi, psi) for pinf/p0, (psi, phi) for p1."""
    if NormRegime(regime).uses_rows:
        return pou.values, dual.values
    return dual.values, pou.values


def block_norm_sup(blocks: Sequence[BandOperator | None], regime: NormRegime) -> float:
    norms = [op_norm(b, regime) for b in blocks if b is not None]
    return max(norms) if norms else 0.0


def assemble_blocks(
    pou: PartitionOfUnity,
    dual: DualFamily,
    blocks: Blocks,
    regime: NormRegime,
    skip: Sequence[int] | None = None,
) -> BandOperator:
    """
    Sum phi_i B_i psi_i (pinf/p0) or psi_i B_i phi_i (p1) over i not in skip.

    The result has norm at most sup_i ‖B_i‖ in the same regime; the bound is
    checked and logged.
    """
    regime = NormRegime(regime)
    _check_family(pou, dual)
    skip_set = set(skip or ())
    block_list = _block_list(blocks, len(pou), skip_set)
    left, right = _regime_sides(pou, dual, regime)

    space = pou.space
    total = sp.csr_matrix((space.size, space.size))
    for i, block in enumerate(block_list):
        if block is None:
            continue
        if block.space is not space:
            raise PartitionError(f"Block {i} lives on a different space")
        total = total + sp.diags(left[i]) @ block.matrix @ sp.diags(right[i])
    result = BandOperator(space, total)

    bound = block_norm_sup(block_list, regime)
    measured = op_norm(result, regime)
    get_certificate_logger().assembly_bound(regime.value, bound, measured)
    if measured > bound * (1 + BOUND_SLACK) + SUM_TOL:
        raise InvariantViolation(f"Assembled norm {measured:.12g} exceeds sup block norm {bound:.12g}")
    return result


@dataclass(frozen=True)
class CommutatorEpsilon:
    """How eps was obtained for a commutator assembly bound eps*N*M*‖A‖."""

    side: str
    regime: str
    hypothesis: str
    eps: float
    r: float
    N: int
    M: float
    norm_A: float

    @property
    def bound(self) -> float:
        return self.eps * self.N * self.M * self.norm_A


_REQUIRED_CERTIFICATE: dict[tuple[str, bool], Certificate] = {
    ("right", True): "lipschitz",
    ("right", False): "variation",
    ("left", True): "variation",
    ("left", False): "lipschitz",
}


def required_certificate(side: Side, regime: NormRegime) -> Certificate:
    """Hypothesis each (side, regime) case of the commutator estimate needs."""
    return _REQUIRED_CERTIFICATE[(side, NormRegime(regime).uses_rows)]


def derive_epsilon(
    pou: PartitionOfUnity,
    dual: DualFamily,
    A: BandOperator,
    regime: NormRegime,
    side: Side,
    certificate: Certificate | None,
    M: float,
) -> CommutatorEpsilon:
    """eps = r * L under a Lipschitz hypothesis, the measured variation otherwise."""
    regime = NormRegime(regime)
    if side not in ("right", "left"):
        raise PartitionError(f"side must be 'right' or 'left', got {side!r}")
    if certificate is None:
        raise PartitionError(
            f"Commutator assembly ({side}, {regime.value}) needs a certificate: "
            f"state whether the variation or the Lipschitz bound applies"
        )
    needed = required_certificate(side, regime)
    if certificate != needed:
        raise PartitionError(
            f"Commutator assembly ({side}, {regime.value}) uses the {needed} hypothesis, not {certificate}"
        )
    r = float(A.propagation)
    if certificate == "lipschitz":
        eps = r * dual.lipschitz_constant
    else:
        eps = variation(pou, r) if r > 0 else 0.0
    return CommutatorEpsilon(
        side=side,
        regime=regime.value,
        hypothesis=certificate,
        eps=eps,
        r=r,
        N=A.space.geometry_profile(A.propagation),
        M=M,
        norm_A=op_norm(A, regime),
    )


def commutator_assembly(
    pou: PartitionOfUnity,
    dual: DualFamily,
    blocks: Blocks,
    A: BandOperator,
    regime: NormRegime,
    side: Side = "right",
    certificate: Certificate | None = None,
    skip: Sequence[int] | None = None,
) -> BandOperator:
    """
    Assemble the commutator sums whose norm is at most eps*N*M*‖A‖.

    ========  ==========  ======================  ===========
    side      regime      operator                hypothesis
    ========  ==========  ======================  ===========
    right     pinf, p0    sum phi_i B_i [psi_i,A]  lipschitz
    right     p1          sum psi_i B_i [phi_i,A]  variation
    left      pinf, p0    sum [phi_i,A] B_i psi_i  variation
    left      p1          sum [psi_i,A] B_i phi_i  lipschitz
    ========  ==========  ======================  ===========

    with [f, A] = fA - Af. The eps derivation is logged and the bound checked.
    """
    regime = NormRegime(regime)
    _check_family(pou, dual)
    skip_set = set(skip or ())
    block_list = _block_list(blocks, len(pou), skip_set)
    M = block_norm_sup(block_list, regime)
    derivation = derive_epsilon(pou, dual, A, regime, side, certificate, M)

    outer, inner = _regime_sides(pou, dual, regime)
    space = pou.space
    total = sp.csr_matrix((space.size, space.size))
    for i, block in enumerate(block_list):
        if block is None:
            continue
        if side == "right":
            term = sp.diags(outer[i]) @ block.matrix @ multiplication_commutator(inner[i], A).matrix
        else:
            term = multiplication_commutator(outer[i], A).matrix @ block.matrix @ sp.diags(inner[i])
        total = total + term
    result = BandOperator(space, total)

    measured = op_norm(result, regime)
    details = {
        "side": side,
        "regime": regime.value,
        "hypothesis": derivation.hypothesis,
        "eps": derivation.eps,
        "r": derivation.r,
        "N": derivation.N,
        "M": derivation.M,
        "norm_A": derivation.norm_A,
        "bound": derivation.bound,
        "measured": measured,
    }
    get_certificate_logger().commutator_epsilon(details)
    if measured > derivation.bound * (1 + BOUND_SLACK) + SUM_TOL:
        raise InvariantViolation(
            f"Commutator assembly norm {measured:.12g} exceeds eps*N*M*‖A‖ = {derivation.bound:.12g}"
        )
    return result


def smooth(A: BandOperator, n: int, regime: NormRegime, pou: PartitionOfUnity) -> BandOperator:
    """
    M_n(A) = sum phi_i A psi_i^(n) (pinf/p0) or sum psi_i^(n) A phi_i (p1),
    with psi^(n) the (1/n)-Lipschitz dual family.

    Entrywise this is A_xy * sum_i phi_i(x) psi_i(y) (resp. psi_i(x) phi_i(y)),
    so M_n(A) keeps the sparsity pattern of A.
    """
    if n < 1:
        raise PartitionError(f"Smoothing index must be >= 1, got {n}")
    if pou.space is not A.space:
        raise PartitionError("Partition and operator live on different spaces")
    dual = build_dual_family(pou, 1.0 / n)
    left, right = _regime_sides(pou, dual, regime)
    coo = A.matrix.tocoo()
    weights = np.einsum("ij,ij->j", left[:, coo.row], right[:, coo.col]) if coo.nnz else np.zeros(0)
    matrix = sp.coo_matrix((coo.data * weights, (coo.row, coo.col)), shape=coo.shape)
    return BandOperator(A.space, matrix, label=f"M_{n}({A.label})" if A.label else f"M_{n}")


def export_family_csv(space: Space, values: np.ndarray, path: Path | str) -> Path:
    """Write nonzero values as ``index, point, value`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "point", "value"])
        for i, row in enumerate(np.asarray(values)):
            for x in np.flatnonzero(row):
                writer.writerow([i, space.point_id(x), f"{row[x]:.17g}"])
    return path
