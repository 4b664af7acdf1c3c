"""Test fixtures for bdo-tool."""

import copy
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
sys.path.insert(0, str(Path(__file__).parent))

from fixtures import OPERATOR_ZOO, PATH_DISTANCES, PATH_LABELS
from services.operator_service import band_from_offsets, from_dense
from services.space_service import make_grid_space, make_table_space


def build_zoo_operator(name: str):
    """Window and operator for one zoo entry."""
    dim, lo, hi, terms = OPERATOR_ZOO[name]
    space = make_grid_space(dim, lo, hi)
    return band_from_offsets(space, terms, label=name)


COEFFICIENTS = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def banded(n: int, b: int, values: np.ndarray) -> np.ndarray:
    dense = np.zeros((n, n))
    for j, k in enumerate(range(-b, b + 1)):
        dense += np.diag(values[: n - abs(k), j], k)
    return dense


@st.composite
def band_matrices(draw):
    """Random dense band matrices on a line window of at least 2b + 1 points."""
    b = draw(st.integers(min_value=0, max_value=2))
    n = draw(st.integers(min_value=2 * b + 1, max_value=40))
    values = draw(arrays(np.float64, (n, 2 * b + 1), elements=COEFFICIENTS))
    return from_dense(make_grid_space(1, [0], [n - 1]), banded(n, b, values)), b


@st.composite
def band_pairs(draw):
    """Two random band operators on one shared line window."""
    b = draw(st.integers(min_value=0, max_value=2))
    n = draw(st.integers(min_value=2 * b + 1, max_value=30))
    space = make_grid_space(1, [0], [n - 1])
    first, second = (draw(arrays(np.float64, (n, 2 * b + 1), elements=COEFFICIENTS)) for _ in range(2))
    return from_dense(space, banded(n, b, first)), from_dense(space, banded(n, b, second))


@pytest.fixture
def line_window():
    """The window [-30, 30] of Z with the l1 metric."""
    return make_grid_space(1, [-30], [30])


@pytest.fixture
def plane_window():
    """The window [-5, 5]^2 of Z^2 with the l1 metric."""
    return make_grid_space(2, [-5, -5], [5, 5])


@pytest.fixture
def path_space():
    """Explicit four-point path metric."""
    return make_table_space(PATH_LABELS, PATH_DISTANCES)


@pytest.fixture
def rng():
    """Seeded generator for randomized oracles."""
    return np.random.default_rng(20240611)


@pytest.fixture(params=sorted(OPERATOR_ZOO))
def zoo_operator(request):
    """Every operator of the zoo in turn."""
    return build_zoo_operator(request.param)


@pytest.fixture
def tridiagonal():
    return build_zoo_operator("tridiagonal")


@pytest.fixture
def make_config():
    """Deep copy of a sample config so tests can edit it freely."""
    def _make(document: dict, **overrides) -> dict:
        result = copy.deepcopy(document)
        result.update(overrides)
        return result
    return _make
