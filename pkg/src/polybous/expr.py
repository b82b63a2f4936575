"""Closed-form data in x, y.

Expressions are validated against a small grammar (numbers, ``x``, ``y``,
``pi``, ``e``, ``+ - * / ^``, parentheses, ``sin``, ``cos``, ``exp``) and
turned into an immutable sympy tree, which gives exact derivatives for the
analytic lifting mode and a numpy evaluator via ``lambdify``.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

__all__ = ["Expression", "ExpressionError", "parse_expression", "as_field_function"]

_X, _Y = sp.symbols("x y", real=True)
_FUNCS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp}
_NAMES = {"x": _X, "y": _Y, "pi": sp.pi, "e": sp.E}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}


class ExpressionError(ValueError):
    pass


def _to_sympy(node: ast.AST, text: str) -> sp.Expr:
    if isinstance(node, ast.Expression):
        return _to_sympy(node.body, text)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_to_sympy(node.left, text), _to_sympy(node.right, text))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        arg = _to_sympy(node.operand, text)
        return -arg if isinstance(node.op, ast.USub) else arg
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id in _NAMES:
            return _NAMES[node.id]
        raise ExpressionError(f"unknown name {node.id!r} in expression {text!r}")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError(f"unsupported function in expression {text!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument in {text!r}")
        return _FUNCS[node.func.id](_to_sympy(node.args[0], text))
    raise ExpressionError(f"unsupported syntax in expression {text!r}")


@dataclass(frozen=True, eq=False)
class Expression:
    """A parsed scalar expression f(x, y); callable on numpy arrays."""

    text: str
    sym: sp.Expr = field(repr=False)

    def __eq__(self, other):
        return isinstance(other, Expression) and self.text == other.text

    def __hash__(self):
        return hash(self.text)

    def __str__(self):
        return self.text

    def __call__(self, x, y):
        fn = _lambdify(self.sym)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            val = np.broadcast_to(np.asarray(fn(x, y), dtype=float), np.broadcast(x, y).shape)
        if not np.all(np.isfinite(val)):
            raise ExpressionError(f"expression {self.text!r} is not finite on the sample points")
        return np.array(val)

    def derived(self, sym: sp.Expr, tag: str) -> "Expression":
        return Expression(f"{tag}({self.text})", sp.simplify(sym))

    def laplacian(self) -> "Expression":
        return self.derived(sp.diff(self.sym, _X, 2) + sp.diff(self.sym, _Y, 2), "lap")

    def gradient(self) -> tuple["Expression", "Expression"]:
        return (self.derived(sp.diff(self.sym, _X), "dx"),
                self.derived(sp.diff(self.sym, _Y), "dy"))


_LAMBDA_CACHE: dict[str, object] = {}


def _lambdify(sym):
    key = sp.srepr(sym)
    fn = _LAMBDA_CACHE.get(key)
    if fn is None:
        fn = sp.lambdify((_X, _Y), sym, modules="numpy")
        _LAMBDA_CACHE[key] = fn
    return fn


def parse_expression(text: str) -> Expression:
    text = str(text).strip()
    if not text:
        raise ExpressionError("empty expression")
    # '^' is exponentiation in the config grammar
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"malformed expression {text!r}: {exc.msg}") from None
    return Expression(text, _to_sympy(tree, text))


def as_field_function(data):
    """Normalise user data (number, string, Expression or callable) to f(x, y)."""
    if data is None:
        return None
    if isinstance(data, Expression) or callable(data):
        return data
    if isinstance(data, str):
        return parse_expression(data)
    if np.isscalar(data):
        return parse_expression(repr(float(data)))
    raise TypeError(f"cannot interpret {data!r} as field data")
