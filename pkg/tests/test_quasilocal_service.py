"""Tests for commutators and the quasi-locality modulus."""

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from conftest import band_matrices, band_pairs, build_zoo_operator
from errors import OperatorError
from services.operator_service import NormRegime, multiply_functions, op_norm
from services.quasilocal_service import (
    LipschitzFunction,
    band_commutator_certificate,
    commutator,
    export_ql_curve_csv,
    extremizer,
    ql_curve,
    ql_modulus,
    sample_lipschitz_function,
)


class TestModulus:
    """Closed-form sup of ‖[A, f]‖."""

    @pytest.mark.parametrize("regime", [NormRegime.PINF, NormRegime.P1])
    @pytest.mark.parametrize("L", [0.01, 0.1, 0.5, 3.0])
    def test_sampled_functions_stay_below(self, zoo_operator, regime, L, rng):
        """Test random L-Lipschitz functions never beat the closed form."""
        modulus = ql_modulus(zoo_operator, L, regime)
        for _ in range(20):
            f = sample_lipschitz_function(zoo_operator.space, L, rng)
            f.verify()
            assert op_norm(commutator(zoo_operator, f), regime) <= modulus * (1 + 1e-9) + 1e-12

    @pytest.mark.parametrize("regime", [NormRegime.PINF, NormRegime.P1])
    @pytest.mark.parametrize("L", [0.05, 0.5, 2.0])
    def test_extremizer_attains(self, zoo_operator, regime, L):
        """Test the extremal function reaches the modulus."""
        modulus = ql_modulus(zoo_operator, L, regime)
        f, _ = extremizer(zoo_operator, L, regime)
        f.verify()
        assert op_norm(commutator(zoo_operator, f), regime) == pytest.approx(modulus, rel=1e-9, abs=1e-12)

    def test_saturation(self, tridiagonal):
        """Test L >= 2 doubles the off-diagonal row sum."""
        assert ql_modulus(tridiagonal, 10.0, NormRegime.PINF) == 4.0
        assert ql_modulus(tridiagonal, 0.0, NormRegime.PINF) == 0.0

    def test_curve_is_sorted_and_monotone(self, tridiagonal):
        """Test the curve follows increasing L."""
        curve = ql_curve(tridiagonal, [1.0, 0.01, 0.1], NormRegime.PINF)
        assert [L for L, _ in curve] == [0.01, 0.1, 1.0]
        values = [value for _, value in curve]
        assert values == sorted(values)

    @pytest.mark.parametrize("regime", [NormRegime.PINF, NormRegime.P1])
    @seed(8642)
    @settings(max_examples=40, deadline=None)
    @given(pair=band_pairs(), L=st.floats(0, 3, allow_nan=False))
    def test_subadditive(self, regime, pair, L):
        """Test ql(A + B, L) <= ql(A, L) + ql(B, L)."""
        A, B = pair
        total = ql_modulus(A, L, regime) + ql_modulus(B, L, regime)
        assert ql_modulus(A + B, L, regime) <= total * (1 + 1e-12) + 1e-12

    def test_negative_L(self, tridiagonal):
        """Test L must be nonnegative."""
        with pytest.raises(OperatorError, match="nonnegative"):
            ql_modulus(tridiagonal, -1.0, NormRegime.PINF)

    def test_export(self, tridiagonal, tmp_path):
        """Test the curve CSV has one line per L."""
        curve = ql_curve(tridiagonal, [0.1, 1.0], NormRegime.PINF)
        lines = export_ql_curve_csv(curve, tmp_path / "ql.csv").read_text().splitlines()
        assert lines == ["L,modulus", "0.1,0.2", "1,2"]


class TestCommutator:
    """[A, f] = Af - fA."""

    @seed(9753)
    @settings(max_examples=40, deadline=None)
    @given(band_matrices(), st.data())
    def test_leibniz_rule(self, sample, data):
        """Test [A, fg] = [A, f] g + f [A, g]."""
        A, _ = sample
        n = A.space.size
        f = data.draw(arrays(np.float64, n, elements=st.floats(-1, 1, allow_nan=False)))
        g = data.draw(arrays(np.float64, n, elements=st.floats(-1, 1, allow_nan=False)))
        lhs = commutator(A, f * g)
        rhs = multiply_functions(None, commutator(A, f), g) + multiply_functions(f, commutator(A, g), None)
        assert np.allclose(lhs.to_dense(), rhs.to_dense(), rtol=0.0, atol=1e-12)

    def test_matches_definition(self, tridiagonal, rng):
        """Test the entrywise form equals A f - f A."""
        f = sample_lipschitz_function(tridiagonal.space, 0.2, rng)
        dense = tridiagonal.to_dense()
        expected = dense @ np.diag(f.values) - np.diag(f.values) @ dense
        assert np.allclose(commutator(tridiagonal, f).to_dense(), expected, atol=1e-14)


class TestCertificate:
    """L = eps / (r*M*N)."""

    def test_band_certificate(self, tridiagonal):
        """Test the certified L keeps the modulus below eps."""
        cert = band_commutator_certificate(tridiagonal, 0.5, NormRegime.PINF)
        assert cert["L"] == pytest.approx(0.5 / (1 * 4.0 * 3))
        assert cert["modulus"] <= 0.5
        assert not cert["sentinel"]

    def test_diagonal_sentinel(self):
        """Test a diagonal operator gets L = inf."""
        cert = band_commutator_certificate(build_zoo_operator("decaying_diagonal"), 0.1, NormRegime.PINF)
        assert cert["L"] == math.inf
        assert cert["sentinel"]

    def test_eps_positive(self, tridiagonal):
        """Test eps must be positive."""
        with pytest.raises(OperatorError, match="eps must be positive"):
            band_commutator_certificate(tridiagonal, 0.0, NormRegime.PINF)


class TestLipschitzFunction:
    """Functions in the unit ball."""

    def test_unit_ball(self, line_window):
        """Test values outside [-1, 1] are rejected."""
        with pytest.raises(OperatorError, match="unit ball"):
            LipschitzFunction(line_window, np.full(line_window.size, 1.5), 1.0)

    def test_wrong_length(self, line_window):
        """Test the value count must match the space."""
        with pytest.raises(OperatorError, match="values"):
            LipschitzFunction(line_window, np.zeros(3), 1.0)

    def test_sample_on_table(self, path_space, rng):
        """Test McShane samples on an explicit table respect L."""
        f = sample_lipschitz_function(path_space, 0.3, rng)
        assert f.audit() <= 0.3 + 1e-12
