"""Coefficient expression grammar for band operators.

Grammar (left-associative, standard precedence)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := atom ('^' ['-'] INTEGER)?
    atom    := NUMBER | VARIABLE | FUNCTION '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``x0 .. x{dim-1}``; ``x`` is accepted as ``x0``. Exponents
are integer literals and cannot be chained, so ``a^b^c`` is rejected rather
than given an associativity. Evaluation is vectorized over coordinate arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from errors import ExpressionEvaluationError, ExpressionSyntaxError

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)

UNARY_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "abs": np.abs,
    "sign": np.sign,
    "exp": np.exp,
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
}

VARIADIC_FUNCTIONS: dict[str, Callable[..., np.ndarray]] = {
    "min": lambda *args: np.minimum.reduce(np.broadcast_arrays(*args)),
    "max": lambda *args: np.maximum.reduce(np.broadcast_arrays(*args)),
}

_VARIABLE_RE = re.compile(r"^x(\d*)$")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    position: int


# AST nodes -----------------------------------------------------------------

@dataclass(frozen=True)
class Number:
    value: float
    position: int


@dataclass(frozen=True)
class Variable:
    axis: int
    position: int


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"
    position: int


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"
    position: int


@dataclass(frozen=True)
class Power:
    base: "Node"
    exponent: int
    position: int


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Node", ...]
    position: int


Node = Union[Number, Variable, Unary, Binary, Power, Call]


def tokenize(source: str) -> list[Token]:
    """Split an expression into tokens, rejecting unknown characters."""
    tokens: list[Token] = []
    pos = 0
    stripped_end = len(source.rstrip())
    while pos < stripped_end:
        match = _TOKEN_RE.match(source, pos)
        if not match or match.end() == pos:
            column = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExpressionSyntaxError(f"Unexpected character {source[column]!r}", column)
        kind = match.lastgroup
        tokens.append(Token(kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(Token("end", "", len(source)))
    return tokens


class _Parser:
    """Recursive-descent parser over a token list."""

    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text: str) -> Token:
        token = self.current
        if token.text != text:
            found = token.text or "end of expression"
            raise ExpressionSyntaxError(f"Expected {text!r}, found {found!r}", token.position)
        return self.advance()

    def parse(self) -> Node:
        if self.current.kind == "end":
            raise ExpressionSyntaxError("Empty expression", 0)
        node = self.expr()
        if self.current.kind != "end":
            raise ExpressionSyntaxError(f"Unexpected {self.current.text!r}", self.current.position)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.current.text in ("+", "-"):
            op = self.advance()
            node = Binary(op.text, node, self.term(), op.position)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.current.text in ("*", "/"):
            op = self.advance()
            node = Binary(op.text, node, self.unary(), op.position)
        return node

    def unary(self) -> Node:
        if self.current.text in ("+", "-"):
            op = self.advance()
            return Unary(op.text, self.unary(), op.position)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.current.text != "^":
            return base
        caret = self.advance()
        sign = 1
        if self.current.text == "-":
            self.advance()
            sign = -1
        token = self.current
        if token.kind != "number" or not token.text.isdigit():
            raise ExpressionSyntaxError("Exponent must be an integer literal", token.position)
        self.advance()
        if self.current.text == "^":
            raise ExpressionSyntaxError("Chained exponents are not allowed; use parentheses", self.current.position)
        return Power(base, sign * int(token.text), caret.position)

    def atom(self) -> Node:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Number(float(token.text), token.position)
        if token.kind == "name":
            self.advance()
            if self.current.text == "(":
                return self.call(token)
            match = _VARIABLE_RE.match(token.text)
            if match:
                return Variable(int(match.group(1) or 0), token.position)
            raise ExpressionSyntaxError(f"Unknown name {token.text!r}", token.position)
        if token.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = token.text or "end of expression"
        raise ExpressionSyntaxError(f"Unexpected {found!r}", token.position)

    def call(self, name: Token) -> Node:
        if name.text not in UNARY_FUNCTIONS and name.text not in VARIADIC_FUNCTIONS:
            raise ExpressionSyntaxError(f"Unknown function {name.text!r}", name.position)
        self.expect("(")
        args = [self.expr()]
        while self.current.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if name.text in UNARY_FUNCTIONS and len(args) != 1:
            raise ExpressionSyntaxError(f"{name.text} takes exactly one argument", name.position)
        if name.text in VARIADIC_FUNCTIONS and len(args) < 2:
            raise ExpressionSyntaxError(f"{name.text} takes at least two arguments", name.position)
        return Call(name.text, tuple(args), name.position)


class CoefficientExpression:
    """A parsed coefficient expression over x0..x{dim-1}."""

    def __init__(self, source: str):
        self.source = source
        self.ast: Node = _Parser(source).parse()

    def __repr__(self) -> str:
        return f"CoefficientExpression({self.source!r})"

    @property
    def node_count(self) -> int:
        """Number of AST nodes; an integer power counts with its base."""
        return _count(self.ast)

    @property
    def max_axis(self) -> int:
        """Highest variable index referenced, -1 for constants."""
        return _max_axis(self.ast)

    @property
    def is_constant(self) -> bool:
        return self.max_axis < 0

    def evaluate(self, coords: np.ndarray) -> np.ndarray:
        """
        Evaluate at every row of an (n, dim) coordinate array.

        Raises:
            ExpressionEvaluationError: on a missing axis, division by zero or a
                non-finite value, naming the source column and point index.
        """
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        if self.max_axis >= coords.shape[1]:
            raise ExpressionEvaluationError(
                f"Variable x{self.max_axis} needs a space of dimension > {self.max_axis}",
                _first_variable_position(self.ast, self.max_axis),
            )
        values = _evaluate(self.ast, coords)
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), (coords.shape[0],)).copy()
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise ExpressionEvaluationError("Non-finite coefficient value", 0, int(bad[0]))
        return values


def parse_expression(source: str) -> CoefficientExpression:
    """Parse a coefficient expression."""
    return CoefficientExpression(source)


def _count(node: Node) -> int:
    if isinstance(node, (Number, Variable)):
        return 1
    if isinstance(node, Unary):
        return 1 + _count(node.operand)
    if isinstance(node, Binary):
        return 1 + _count(node.left) + _count(node.right)
    if isinstance(node, Power):
        # integer exponent annotates its base: x0^2 is one node
        return _count(node.base)
    return 1 + sum(_count(arg) for arg in node.args)


def _max_axis(node: Node) -> int:
    if isinstance(node, Number):
        return -1
    if isinstance(node, Variable):
        return node.axis
    if isinstance(node, Unary):
        return _max_axis(node.operand)
    if isinstance(node, Binary):
        return max(_max_axis(node.left), _max_axis(node.right))
    if isinstance(node, Power):
        return _max_axis(node.base)
    return max(_max_axis(arg) for arg in node.args)


def _first_variable_position(node: Node, axis: int) -> int | None:
    if isinstance(node, Variable):
        return node.position if node.axis == axis else None
    children: tuple = ()
    if isinstance(node, Unary):
        children = (node.operand,)
    elif isinstance(node, Binary):
        children = (node.left, node.right)
    elif isinstance(node, Power):
        children = (node.base,)
    elif isinstance(node, Call):
        children = node.args
    for child in children:
        found = _first_variable_position(child, axis)
        if found is not None:
            return found
    return None


def _evaluate(node: Node, coords: np.ndarray) -> np.ndarray:
    if isinstance(node, Number):
        return np.full(coords.shape[0], node.value)
    if isinstance(node, Variable):
        return coords[:, node.axis]
    if isinstance(node, Unary):
        value = _evaluate(node.operand, coords)
        return -value if node.op == "-" else value
    if isinstance(node, Binary):
        left = _evaluate(node.left, coords)
        right = _evaluate(node.right, coords)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        zero = np.flatnonzero(right == 0)
        if zero.size:
            raise ExpressionEvaluationError("Division by zero", node.position, int(zero[0]))
        return left / right
    if isinstance(node, Power):
        base = _evaluate(node.base, coords)
        if node.exponent < 0:
            zero = np.flatnonzero(base == 0)
            if zero.size:
                raise ExpressionEvaluationError("Zero raised to a negative power", node.position, int(zero[0]))
        return np.power(base, float(node.exponent))
    args = [_evaluate(arg, coords) for arg in node.args]
    if node.name in UNARY_FUNCTIONS:
        with np.errstate(over="ignore"):
            return UNARY_FUNCTIONS[node.name](args[0])
    return VARIADIC_FUNCTIONS[node.name](*args)
