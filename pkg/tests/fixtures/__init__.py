"""Test fixtures package."""

from .sample_data import (
    DECAYING_FREDHOLM_CONFIG,
    MINIMAL_CONFIG,
    OPERATOR_ZOO,
    PATH_DISTANCES,
    PATH_LABELS,
    SHIFT_FREDHOLM_CONFIG,
    TRIDIAGONAL_CONFIG,
)

__all__ = [
    "DECAYING_FREDHOLM_CONFIG",
    "MINIMAL_CONFIG",
    "OPERATOR_ZOO",
    "PATH_DISTANCES",
    "PATH_LABELS",
    "SHIFT_FREDHOLM_CONFIG",
    "TRIDIAGONAL_CONFIG",
]
