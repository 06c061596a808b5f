"""JSON descriptors for fields and kernels.

One document describes one object through a ``kind`` tag:

fields
    {"kind": "constant",  "vector": [1, 0]}
    {"kind": "linear",    "matrix": [[0, 1], [-1, 0]]}
    {"kind": "zero",      "dim": 2}
    {"kind": "sign",      "vector": [1, 0], "normal": [0, 1], "offset": 0.0}
    {"kind": "piecewise", "normal": [...], "offset": c,
                          "plus": <field>, "minus": <field>}
    {"kind": "expression", "components": ["sin(x1)", "x1*x2"]}

kernels
    {"kind": "constant", "dim": 2}
    {"kind": "hermite2", "alphas": [0.3, 0.0]}
    {"kind": "flow",     "matrix": [[...]], "horizon": 5.0, "nodes": 16}
    {"kind": "bump",     "dim": 1, "radius": 1.0}

Expression components use a whitelisted grammar over the symbols x1..xN and
the functions sin, cos, exp, tanh, sqrt; they are parsed with sympy and the
Jacobian is produced by exact symbolic differentiation, so expression fields
satisfy the closed-form-Jacobian contract.
"""

from __future__ import annotations

import ast
import json
from pathlib import Path

import numpy as np
import sympy as sp

from .expflow import HSMatrix
from .fields import (BVField, SmoothField, constant_field, linear_field,
                     piecewise_field, sign_field, zero_field)
from .gauss import GaussianSpace
from .mollifier import Mollifier, bump_kernel, hermite_quadratic_kernel, unit_kernel
from .optimizer import averaged_kernel

_ALLOWED_FUNCS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp,
                  "tanh": sp.tanh, "sqrt": sp.sqrt}


class DescriptorError(ValueError):
    pass


def _load_doc(doc) -> dict:
    if isinstance(doc, (str, Path)):
        with open(doc, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return dict(doc)


_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
           ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b,
           ast.Pow: lambda a, b: a ** b}


def _to_sympy(node: ast.AST, names: dict) -> sp.Expr:
    """AST -> sympy, admitting only arithmetic, numbers, x_i and the
    whitelisted functions.  Never evaluates Python code."""
    if isinstance(node, ast.Expression):
        return _to_sympy(node.body, names)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return sp.Float(node.value) if isinstance(node.value, float) \
            else sp.Integer(node.value)
    if isinstance(node, ast.Name):
        if node.id in names:
            return names[node.id]
        raise DescriptorError(f"unknown symbol {node.id!r}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_to_sympy(node.left, names),
                                      _to_sympy(node.right, names))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        val = _to_sympy(node.operand, names)
        return -val if isinstance(node.op, ast.USub) else val
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
            and node.func.id in _ALLOWED_FUNCS and not node.keywords \
            and len(node.args) == 1:
        return _ALLOWED_FUNCS[node.func.id](_to_sympy(node.args[0], names))
    raise DescriptorError(f"expression element {ast.dump(node)} not in grammar")


def _parse_components(components: list[str], dim: int):
    symbols = sp.symbols(f"x1:{dim + 1}")
    names = {f"x{i + 1}": symbols[i] for i in range(dim)}
    exprs = []
    for text in components:
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise DescriptorError(f"cannot parse component {text!r}: {exc}")
        exprs.append(sp.simplify(_to_sympy(tree, names)))
    return symbols, exprs


def expression_field(components: list[str]) -> SmoothField:
    """Field from whitelisted expressions, one per component."""
    dim = len(components)
    symbols, exprs = _parse_components(components, dim)
    jac_exprs = [[sp.diff(e, s) for s in symbols] for e in exprs]
    val_fns = [sp.lambdify(symbols, e, modules="numpy") for e in exprs]
    jac_fns = [[sp.lambdify(symbols, d, modules="numpy") for d in row]
               for row in jac_exprs]

    def value(pts):
        cols = pts.T
        out = np.empty((pts.shape[0], dim))
        for i, fn in enumerate(val_fns):
            out[:, i] = np.broadcast_to(fn(*cols), pts.shape[0])
        return out

    def jac(pts):
        cols = pts.T
        out = np.empty((pts.shape[0], dim, dim))
        for i, row in enumerate(jac_fns):
            for j, fn in enumerate(row):
                out[:, i, j] = np.broadcast_to(fn(*cols), pts.shape[0])
        return out

    return SmoothField(dim, value, jac, name="expr")


def load_field(doc, space: GaussianSpace | None = None):
    """Build a SmoothField or BVField from a descriptor document."""
    d = _load_doc(doc)
    kind = d.get("kind")
    if kind == "constant":
        return constant_field(np.asarray(d["vector"], dtype=float))
    if kind == "linear":
        return linear_field(np.asarray(d["matrix"], dtype=float))
    if kind == "zero":
        return zero_field(int(d["dim"]))
    if kind == "sign":
        return sign_field(np.asarray(d["vector"], dtype=float),
                          np.asarray(d["normal"], dtype=float),
                          float(d.get("offset", 0.0)))
    if kind == "piecewise":
        plus = load_field(d["plus"])
        minus = load_field(d["minus"])
        if isinstance(plus, BVField) or isinstance(minus, BVField):
            raise DescriptorError("piecewise pieces must be smooth")
        return piecewise_field(minus, plus,
                               np.asarray(d["normal"], dtype=float),
                               float(d.get("offset", 0.0)))
    if kind == "expression":
        return expression_field(list(d["components"]))
    raise DescriptorError(f"unknown field kind {kind!r}")


def load_kernel(doc, space: GaussianSpace) -> Mollifier:
    """Build a Mollifier from a descriptor document."""
    d = _load_doc(doc)
    kind = d.get("kind")
    if kind == "constant":
        return unit_kernel(int(d.get("dim", space.dim)))
    if kind == "hermite2":
        alphas = np.asarray(d["alphas"], dtype=float)
        return hermite_quadratic_kernel(alphas.size, alphas)
    if kind == "flow":
        M = HSMatrix(np.asarray(d["matrix"], dtype=float))
        ak = averaged_kernel(M, float(d["horizon"]), int(d.get("nodes", 16)),
                             space)
        return ak.as_mollifier(space)
    if kind == "bump":
        return bump_kernel(int(d.get("dim", space.dim)),
                           float(d.get("radius", 1.0)))
    raise DescriptorError(f"unknown kernel kind {kind!r}")
