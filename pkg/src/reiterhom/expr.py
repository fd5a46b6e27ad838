"""A small, fixed expression language for coefficients, sources and test functions.

Grammar (Python syntax subset)::

    expr     := expr ('+'|'-'|'*'|'/') expr | '-' expr | '(' expr ')'
              | number | 'pi' | variable | call
    call     := ('sin'|'cos') '(' expr ')'
              | 'piecewise' '(' axis ',' value (',' value)* ')'
    variable := letter digit         e.g. y1, z2, x1, or a bare name such as t

``piecewise(axis, v0, ..., vk)`` is constant per axis: the periodic cell
(-1/2, 1/2) along coordinate ``axis`` (1-based) of the expression's own
variable prefix is split into k+1 equal slabs taking the values v0..vk.
The shorthand string ``"piecewise:[v0,...,vk]"`` means ``piecewise(1, v0, ..., vk)``.

Anything else (attribute access, other functions, powers, comparisons) is
rejected at compile time.
"""

from __future__ import annotations

import ast
import re

import numpy as np

from .errors import UsageError

_FUNCS = {"sin": np.sin, "cos": np.cos}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
}
_SHORTHAND = re.compile(r"^\s*piecewise\s*:\s*\[(.*)\]\s*$")


def wrap_cell(s):
    """Map coordinates into the periodic cell [-1/2, 1/2)."""
    return s - np.floor(s + 0.5)


def _piecewise(coord, values):
    k = len(values)
    idx = np.floor((wrap_cell(coord) + 0.5) * k).astype(int)
    idx = np.clip(idx, 0, k - 1)
    return np.asarray(values, dtype=float)[idx]


class Expression:
    """A compiled expression, evaluated with numpy broadcasting.

    ``variables`` names the admissible free symbols. The special prefix form
    lets a coefficient map take a point array: see :meth:`on_points`.
    """

    def __init__(self, source, variables):
        self.source = str(source)
        self.variables = tuple(variables)
        text = self.source
        m = _SHORTHAND.match(text)
        if m:
            text = f"piecewise(1, {m.group(1)})"
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise UsageError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._tree = tree.body
        self.interfaces = {}
        self._check(self._tree)

    def _check(self, node):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise UsageError(f"operator not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise UsageError(f"operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise UsageError(f"bad constant in {self.source!r}")
        elif isinstance(node, ast.Name):
            if node.id != "pi" and node.id not in self.variables:
                raise UsageError(f"unknown symbol {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.keywords:
                raise UsageError(f"bad call in {self.source!r}")
            name = node.func.id
            if name in _FUNCS:
                if len(node.args) != 1:
                    raise UsageError(f"{name} takes one argument")
                self._check(node.args[0])
            elif name == "piecewise":
                if len(node.args) < 2:
                    raise UsageError("piecewise needs an axis and at least one value")
                axis = self._const(node.args[0])
                if axis != int(axis) or axis < 1:
                    raise UsageError("piecewise axis must be a positive integer")
                vals = [self._const(v) for v in node.args[1:]]
                k = len(vals)
                self.interfaces.setdefault(int(axis), set()).update(
                    wrap_cell(-0.5 + j / k) for j in range(k)
                )
            else:
                raise UsageError(f"unknown function {name!r} in {self.source!r}")
        else:
            raise UsageError(f"construct not allowed in {self.source!r}")

    def _const(self, node):
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -self._const(node.operand)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        raise UsageError(f"piecewise arguments must be numeric literals in {self.source!r}")

    def __call__(self, **env):
        return self._eval(self._tree, env)

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return np.pi
            return env[node.id]
        name = node.func.id
        if name == "piecewise":
            axis = int(self._const(node.args[0]))
            vals = [self._const(v) for v in node.args[1:]]
            coord = env.get("_axis", {}).get(axis)
            if coord is None:
                raise UsageError(f"piecewise axis {axis} unavailable in {self.source!r}")
            return _piecewise(coord, vals)
        return _FUNCS[name](self._eval(node.args[0], env))

    @property
    def is_constant(self):
        return not any(isinstance(n, ast.Name) and n.id != "pi" for n in ast.walk(self._tree)) and not self.interfaces


class PointMap:
    """Scalar map of a point array ``P[..., d]`` built from an expression in
    ``<prefix>1, <prefix>2``. Used for the periodic coefficients ``c_y``, ``c_z``.
    """

    def __init__(self, source, prefix, dim=2):
        self.prefix = prefix
        self.dim = dim
        self.expr = Expression(source, [f"{prefix}{i + 1}" for i in range(dim)])
        self.interfaces = self.expr.interfaces

    @property
    def source(self):
        return self.expr.source

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        env = {}
        axes = {}
        for i in range(points.shape[-1]):
            env[f"{self.prefix}{i + 1}"] = points[..., i]
            axes[i + 1] = points[..., i]
        for i in range(points.shape[-1], self.dim):
            env[f"{self.prefix}{i + 1}"] = np.zeros(points.shape[:-1])
        env["_axis"] = axes
        out = self.expr(**env)
        return np.broadcast_to(np.asarray(out, dtype=float), points.shape[:-1]).copy()

    def __repr__(self):
        return f"PointMap({self.source!r}, prefix={self.prefix!r})"


def scalar_function(source, name="t"):
    """Compile a one-variable expression into a vectorized function."""
    expr = Expression(source, [name])

    def fn(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(expr(**{name: t}), dtype=float), t.shape).copy()

    fn.source = expr.source
    return fn


def xyz_function(source, dim=1):
    """Compile a test function of ``x``, ``y`` and ``z`` point arrays.

    The returned callable takes three arrays of shape ``(..., d)`` and
    returns an array of the broadcast leading shape. ``piecewise`` is not
    available here because the prefix would be ambiguous.
    """
    names = [f"{p}{i + 1}" for p in "xyz" for i in range(max(dim, 1))]
    expr = Expression(source, names)
    if expr.interfaces:
        raise UsageError("piecewise is not supported in x/y/z test functions")

    def fn(x, y, z):
        env = {}
        for p, arr in zip("xyz", (x, y, z)):
            arr = np.asarray(arr, dtype=float)
            for i in range(max(dim, 1)):
                env[f"{p}{i + 1}"] = arr[..., i] if i < arr.shape[-1] else 0.0
        shape = np.broadcast_shapes(
            np.shape(x)[:-1], np.shape(y)[:-1], np.shape(z)[:-1]
        )
        return np.broadcast_to(np.asarray(expr(**env), dtype=float), shape).copy()

    fn.source = expr.source
    return fn
