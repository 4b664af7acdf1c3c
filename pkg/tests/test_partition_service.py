"""Tests for partitions of unity, dual families and block assembly."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from conftest import banded, build_zoo_operator
from errors import PartitionError
from services.operator_service import NormRegime, from_dense, identity, op_norm
from services.partition_service import (
    PartitionOfUnity,
    assemble_blocks,
    build_dual_family,
    build_partition,
    commutator_assembly,
    cube_partition,
    export_family_csv,
    required_certificate,
    smooth,
    variation,
)
from services.space_service import make_grid_space


class TestBuildPartition:
    """Certified (r, eps)-variation partitions."""

    def test_tent_partition_on_line(self, line_window):
        """Test tents of width ceil(2r/eps) sum to one with variation <= eps."""
        pou = build_partition(line_window, 1, 0.5)
        assert pou.width == 4
        assert len(pou) == 16
        assert pou.multiplicity == 2
        assert np.allclose(pou.values.sum(axis=0), 1.0, atol=1e-12)
        assert pou.measured_variation <= 0.5 + 1e-12

    def test_plane_partition(self, plane_window):
        """Test the tensored partition in Z^2 keeps the variation bound."""
        pou = build_partition(plane_window, 1, 1.0)
        assert pou.width == 4
        assert variation(pou, 1) <= 1.0 + 1e-12

    def test_large_eps_is_constant(self, line_window):
        """Test eps >= 2 gives the one-element partition."""
        pou = build_partition(line_window, 3, 2.0)
        assert len(pou) == 1
        assert pou.measured_variation == 0.0

    def test_window_too_small(self):
        """Test a short window is refused with the required width."""
        space = make_grid_space(1, [0], [2])
        with pytest.raises(PartitionError, match="Window too small"):
            build_partition(space, 1, 0.1)

    def test_bad_parameters(self, line_window):
        """Test r and eps must be positive."""
        with pytest.raises(PartitionError, match="r must be positive"):
            build_partition(line_window, 0, 0.5)
        with pytest.raises(PartitionError, match="eps must be positive"):
            build_partition(line_window, 1, 0)

    def test_table_partition(self, path_space):
        """Test the net partition on the path metric is accepted at scale 1."""
        pou = build_partition(path_space, 1, 1.5)
        assert len(pou) == 2
        assert pou.measured_variation == pytest.approx(1.0)


class TestPartitionValues:
    """Direct construction checks."""

    def test_values_outside_unit_interval(self, path_space):
        """Test values above one are rejected."""
        with pytest.raises(PartitionError, match="values in \\[0, 1\\]"):
            PartitionOfUnity(path_space, np.full((1, 4), 2.0))

    def test_common_zero(self, path_space):
        """Test a point where every function vanishes is rejected."""
        values = np.array([[1.0, 1.0, 0.0, 1.0]])
        with pytest.raises(PartitionError, match="vanish simultaneously"):
            PartitionOfUnity(path_space, values)

    def test_cube_partition(self, line_window):
        """Test disjoint cube indicators have multiplicity one."""
        pou = cube_partition(line_window, 10)
        assert len(pou) == 7
        assert pou.multiplicity == 1

    def test_cube_partition_needs_grid(self, path_space):
        """Test cubes are only defined on grid windows."""
        with pytest.raises(PartitionError, match="grid window"):
            cube_partition(path_space, 2)

    def test_export_family(self, line_window, tmp_path):
        """Test only nonzero values are written."""
        pou = build_partition(line_window, 1, 0.5)
        path = export_family_csv(line_window, pou.values, tmp_path / "pou.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "index,point,value"
        assert len(lines) - 1 == int((pou.values > 0).sum())


class TestDualFamily:
    """Lipschitz dual families."""

    def test_dual_is_audited(self, line_window):
        """Test psi_i = 1 on supp phi_i and the audited ratio stays below L."""
        pou = build_partition(line_window, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        assert dual.halo == 4.0
        assert dual.audited_ratio <= 0.25 + 1e-12
        assert np.all(dual.values[pou.values > 0] == 1.0)

    def test_nonpositive_lipschitz(self, line_window):
        """Test L must be positive."""
        pou = build_partition(line_window, 1, 0.5)
        with pytest.raises(PartitionError, match="Lipschitz constant"):
            build_dual_family(pou, 0.0)


class TestAssembly:
    """Sums of localized blocks."""

    @pytest.mark.parametrize("regime", list(NormRegime))
    def test_assembled_norm_bound(self, tridiagonal, regime):
        """Test ‖sum phi_i B_i psi_i‖ <= sup ‖B_i‖."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        blocks = [tridiagonal if i % 2 else identity(tridiagonal.space) for i in range(len(pou))]
        result = assemble_blocks(pou, dual, blocks, regime)
        assert op_norm(result, regime) <= 4.0 * (1 + 1e-9)

    def test_skipped_blocks(self, tridiagonal):
        """Test skipped indices may be missing from a mapping."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        blocks = {i: tridiagonal for i in range(1, len(pou))}
        result = assemble_blocks(pou, dual, blocks, NormRegime.PINF, skip=[0])
        assert result.space is tridiagonal.space

    def test_missing_block(self, tridiagonal):
        """Test a missing block that is not skipped is an error."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        with pytest.raises(PartitionError, match="missing"):
            assemble_blocks(pou, dual, {0: tridiagonal}, NormRegime.PINF)

    def test_foreign_dual(self, tridiagonal):
        """Test a dual family of another partition is rejected."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        other = build_dual_family(build_partition(tridiagonal.space, 1, 0.5), 0.25)
        with pytest.raises(PartitionError, match="does not belong"):
            assemble_blocks(pou, other, [tridiagonal] * len(pou), NormRegime.PINF)


class TestCommutatorAssembly:
    """The four (side, regime) cases of the commutator bound."""

    def test_required_certificates(self):
        """Test the hypothesis table."""
        assert required_certificate("right", NormRegime.PINF) == "lipschitz"
        assert required_certificate("right", NormRegime.P1) == "variation"
        assert required_certificate("left", NormRegime.P0) == "variation"
        assert required_certificate("left", NormRegime.P1) == "lipschitz"

    @pytest.mark.parametrize("side,regime,certificate", [
        ("right", NormRegime.PINF, "lipschitz"),
        ("right", NormRegime.P1, "variation"),
        ("left", NormRegime.PINF, "variation"),
        ("left", NormRegime.P1, "lipschitz"),
    ])
    def test_bound_holds(self, tridiagonal, side, regime, certificate):
        """Test every case stays below eps*N*M*‖A‖."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        blocks = [identity(tridiagonal.space)] * len(pou)
        result = commutator_assembly(pou, dual, blocks, tridiagonal, regime, side, certificate)
        eps = 0.25 if certificate == "lipschitz" else variation(pou, 1)
        assert op_norm(result, regime) <= eps * 3 * 1.0 * 4.0 * (1 + 1e-9)

    def test_missing_certificate(self, tridiagonal):
        """Test the hypothesis must be stated."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        blocks = [identity(tridiagonal.space)] * len(pou)
        with pytest.raises(PartitionError, match="needs a certificate"):
            commutator_assembly(pou, dual, blocks, tridiagonal, NormRegime.PINF, "right")

    def test_certificate_mismatch(self, tridiagonal):
        """Test a variation certificate cannot replace the Lipschitz one."""
        pou = build_partition(tridiagonal.space, 1, 0.5)
        dual = build_dual_family(pou, 0.25)
        blocks = [identity(tridiagonal.space)] * len(pou)
        with pytest.raises(PartitionError, match="uses the lipschitz hypothesis"):
            commutator_assembly(pou, dual, blocks, tridiagonal, NormRegime.PINF, "right", "variation")


class TestSmoothing:
    """M_n(A) converges to A."""

    @pytest.mark.parametrize("regime", [NormRegime.PINF, NormRegime.P1])
    def test_smoothing_bounds(self, regime):
        """Test ‖M_n(A) - A‖ <= r*N*‖A‖/n and ‖M_n(A)‖ <= ‖A‖."""
        A = build_zoo_operator("variable_band")
        pou = build_partition(A.space, A.propagation, 1.0)
        norm_A = op_norm(A, regime)
        N = A.space.geometry_profile(A.propagation)
        for n in (1, 2, 4, 8, 16):
            Mn = smooth(A, n, regime, pou)
            assert op_norm(Mn - A, regime) <= A.propagation * N * norm_A / n * (1 + 1e-9)
            assert op_norm(Mn, regime) <= norm_A * (1 + 1e-9)

    @pytest.mark.parametrize("regime", [NormRegime.PINF, NormRegime.P1])
    @seed(3141)
    @settings(max_examples=20, deadline=None)
    @given(
        data=arrays(np.float64, (2, 61, 3), elements=st.floats(-5, 5, allow_nan=False)),
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
        n=st.integers(min_value=1, max_value=8),
    )
    def test_linear(self, regime, data, a, b, n):
        """Test M_n(aA + bB) = a M_n(A) + b M_n(B)."""
        space = make_grid_space(1, [-30], [30])
        pou = build_partition(space, 1, 1.0)
        A, B = (from_dense(space, banded(61, 1, values)) for values in data)
        lhs = smooth(A * a + B * b, n, regime, pou)
        rhs = smooth(A, n, regime, pou) * a + smooth(B, n, regime, pou) * b
        assert np.allclose(lhs.to_dense(), rhs.to_dense(), rtol=0.0, atol=1e-10)

    def test_sparsity_kept(self, tridiagonal):
        """Test smoothing never adds entries."""
        pou = build_partition(tridiagonal.space, 1, 1.0)
        Mn = smooth(tridiagonal, 3, NormRegime.PINF, pou)
        assert Mn.matrix.nnz <= tridiagonal.matrix.nnz

    def test_bad_index(self, tridiagonal):
        """Test n must be at least one."""
        pou = build_partition(tridiagonal.space, 1, 1.0)
        with pytest.raises(PartitionError, match=">= 1"):
            smooth(tridiagonal, 0, NormRegime.PINF, pou)
