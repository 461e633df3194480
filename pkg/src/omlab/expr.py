"""Closed-form field expressions.

Grammar
-------
An expression is built from

* numbers and the constants ``pi`` and ``e``;
* coordinate identifiers ``x1 .. xn`` (grids and atom sets) or ``t``
  (center paths on a path lattice);
* path primitives ``wT`` (terminal value), ``wint`` (time integral of the
  path, trapezoid rule with ``w(0) = 0``) and ``wsup`` (sup norm), available
  only for functionals on a path lattice;
* binary ``+ - * / ^`` (``^`` is exponentiation), unary minus, parentheses;
* functions ``sin cos exp tanh abs sqrt log`` (one argument) and
  ``min max`` (two or more arguments).

Anything else is rejected at parse time, so expressions coming from config
files are never handed to :func:`eval`.
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from functools import reduce

import numpy as np

_UNARY = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "log": np.log,
}
_VARIADIC = {"min": np.minimum, "max": np.maximum}
_CONSTANTS = {"pi": math.pi, "e": math.e}
PATH_PRIMITIVES = ("wT", "wint", "wsup")
_COORD = re.compile(r"^x([1-9][0-9]*)$")

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    """Raised for expressions outside the mini-grammar."""


@dataclass(frozen=True)
class Expression:
    source: str
    tree: ast.Expression
    names: frozenset[str]

    @property
    def is_constant(self) -> bool:
        return not self.names

    @property
    def max_coordinate(self) -> int:
        idx = [int(_COORD.match(n).group(1)) for n in self.names if _COORD.match(n)]
        return max(idx, default=0)

    def evaluate(self, env: dict[str, np.ndarray | float]) -> np.ndarray | float:
        missing = self.names - env.keys()
        if missing:
            raise ExpressionError(f"{self.source!r}: unbound identifiers {sorted(missing)}")
        return _eval(self.tree.body, env)

    def __str__(self) -> str:
        return self.source


def parse(source: str) -> Expression:
    """Parse and validate an expression string."""
    text = str(source).strip()
    if not text:
        raise ExpressionError("empty expression")
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    names: set[str] = set()
    _validate(tree.body, names, text)
    return Expression(text, tree, frozenset(names))


def _validate(node: ast.AST, names: set[str], text: str) -> None:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"{text!r}: only numeric literals are allowed")
    elif isinstance(node, ast.Name):
        if node.id in _CONSTANTS:
            return
        if _COORD.match(node.id) or node.id == "t" or node.id in PATH_PRIMITIVES:
            names.add(node.id)
            return
        raise ExpressionError(f"{text!r}: unknown identifier {node.id!r}")
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"{text!r}: operator {type(node.op).__name__} not allowed")
        _validate(node.left, names, text)
        _validate(node.right, names, text)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError(f"{text!r}: unary {type(node.op).__name__} not allowed")
        _validate(node.operand, names, text)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise ExpressionError(f"{text!r}: malformed call")
        fname = node.func.id
        if fname in _UNARY:
            if len(node.args) != 1:
                raise ExpressionError(f"{text!r}: {fname} takes one argument")
        elif fname in _VARIADIC:
            if len(node.args) < 2:
                raise ExpressionError(f"{text!r}: {fname} needs at least two arguments")
        else:
            raise ExpressionError(f"{text!r}: unknown function {fname!r}")
        for arg in node.args:
            _validate(arg, names, text)
    else:
        raise ExpressionError(f"{text!r}: {type(node).__name__} not allowed")


def _eval(node: ast.AST, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id in _CONSTANTS:
            return _CONSTANTS[node.id]
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, env)
        return -val if isinstance(node.op, ast.USub) else val
    # ast.Call, already validated
    fname = node.func.id
    args = [_eval(a, env) for a in node.args]
    if fname in _UNARY:
        return _UNARY[fname](args[0])
    return reduce(_VARIADIC[fname], args)


def coordinate_env(coords: np.ndarray) -> dict[str, np.ndarray]:
    """Bind ``x1..xn`` to the columns of an ``(m, n)`` coordinate array."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    return {f"x{i + 1}": coords[:, i] for i in range(coords.shape[1])}


def path_env(paths: np.ndarray, times: np.ndarray) -> dict[str, np.ndarray]:
    """Bind the path primitives for an ``(m, steps)`` array of lattice paths.

    ``times`` are the lattice times ``t_1 < ... < t_steps``; every path starts
    at ``w(0) = 0``.
    """
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    full = np.concatenate([np.zeros((paths.shape[0], 1)), paths], axis=1)
    grid = np.concatenate([[0.0], np.asarray(times, dtype=float)])
    return {
        "wT": paths[:, -1],
        "wint": np.trapezoid(full, grid, axis=1),
        "wsup": np.abs(paths).max(axis=1),
    }
