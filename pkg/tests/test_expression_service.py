"""Tests for the coefficient expression grammar."""

from pathlib import Path

import numpy as np
import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from errors import ExpressionEvaluationError, ExpressionSyntaxError
from services.expression_service import Binary, Number, parse_expression


def evaluate(source: str, *points) -> list[float]:
    coords = np.array(points, dtype=np.float64).reshape(len(points), -1)
    return parse_expression(source).evaluate(coords).tolist()


class TestParsing:
    """Grammar structure and node counts."""

    def test_decaying_coefficient_node_count(self):
        """Test 2 + 1/(1+x0^2) has 7 nodes."""
        assert parse_expression("2 + 1/(1+x0^2)").node_count == 7

    def test_power_counts_with_base(self):
        """Test an integer exponent adds no node of its own."""
        assert parse_expression("x0^2").node_count == 1
        assert parse_expression("(1 + x0)^-3").node_count == 3
        assert parse_expression("sin(x0)^2").node_count == parse_expression("sin(x0)").node_count

    def test_left_associative_subtraction(self):
        """Test a - b - c groups as (a - b) - c."""
        ast = parse_expression("8 - 4 - 2").ast
        assert isinstance(ast, Binary) and ast.op == "-"
        assert isinstance(ast.right, Number) and ast.right.value == 2.0
        assert evaluate("8 - 4 - 2", [0]) == [2.0]

    def test_precedence(self):
        """Test multiplication binds tighter than addition."""
        assert evaluate("1 + 2*3", [0]) == [7.0]
        assert evaluate("(1 + 2)*3", [0]) == [9.0]

    def test_unary_minus_and_power(self):
        """Test -x^2 is -(x^2)."""
        assert evaluate("-x0^2", [3]) == [-9.0]

    def test_x_alias(self):
        """Test x is accepted as x0."""
        assert evaluate("x + 1", [4]) == [5.0]

    def test_max_axis(self):
        """Test the highest referenced axis is reported."""
        assert parse_expression("x0 + x2").max_axis == 2
        assert parse_expression("3").is_constant

    def test_chained_exponent_rejected(self):
        """Test a^b^c is a syntax error."""
        with pytest.raises(ExpressionSyntaxError, match="Chained exponents"):
            parse_expression("x0^2^3")

    def test_non_integer_exponent(self):
        """Test fractional exponents are rejected."""
        with pytest.raises(ExpressionSyntaxError, match="integer literal"):
            parse_expression("x0^0.5")

    def test_unknown_function_position(self):
        """Test an unknown function reports its column."""
        with pytest.raises(ExpressionSyntaxError, match="column 5") as info:
            parse_expression("1 + log(x0)")
        assert info.value.position == 4

    def test_unexpected_character(self):
        """Test stray characters are rejected."""
        with pytest.raises(ExpressionSyntaxError, match="Unexpected character"):
            parse_expression("x0 $ 2")

    def test_empty_expression(self):
        """Test blank sources are rejected."""
        with pytest.raises(ExpressionSyntaxError, match="Empty"):
            parse_expression("   ")

    def test_unbalanced_parenthesis(self):
        """Test a missing closing parenthesis is reported."""
        with pytest.raises(ExpressionSyntaxError, match="Expected '\\)'"):
            parse_expression("(1 + x0")

    def test_function_arity(self):
        """Test unary functions take one argument and min/max at least two."""
        with pytest.raises(ExpressionSyntaxError, match="exactly one"):
            parse_expression("abs(1, 2)")
        with pytest.raises(ExpressionSyntaxError, match="at least two"):
            parse_expression("min(1)")


class TestEvaluation:
    """Vectorized evaluation."""

    def test_functions(self):
        """Test the built-in functions."""
        assert evaluate("abs(x0)", [-2]) == [2.0]
        assert evaluate("sign(x0)", [-2]) == [-1.0]
        assert evaluate("min(x0, 1, 3)", [2]) == [1.0]
        assert evaluate("max(x0, 1)", [2]) == [2.0]
        assert evaluate("tanh(0) + exp(0)", [0]) == [1.0]

    def test_two_dimensional(self):
        """Test variables index the coordinate columns."""
        assert evaluate("x0 - 2*x1", [1, 3], [4, 1]) == [-5.0, 2.0]

    def test_division_by_zero_location(self):
        """Test division by zero reports the operator column and point index."""
        with pytest.raises(ExpressionEvaluationError, match="Division by zero") as info:
            evaluate("1/x0", [1], [0], [2])
        assert info.value.position == 1
        assert info.value.point_index == 1

    def test_negative_power_of_zero(self):
        """Test 0^-1 is a located evaluation error."""
        with pytest.raises(ExpressionEvaluationError, match="negative power") as info:
            evaluate("x0^-1", [3], [0])
        assert info.value.point_index == 1

    def test_missing_axis(self):
        """Test x1 on one-dimensional coordinates fails."""
        with pytest.raises(ExpressionEvaluationError, match="dimension > 1"):
            evaluate("x1", [0])

    def test_overflow_is_an_error(self):
        """Test non-finite values are rejected."""
        with pytest.raises(ExpressionEvaluationError, match="Non-finite"):
            evaluate("exp(x0)", [1000])
