"""Uniform Q1 tensor grids on unit cells and on Omega = (0,1)^d, d in {1, 2}.

Nodal scalar fields live on the degrees of freedom of a grid: periodic grids
identify opposite faces (``n**d`` dofs), Dirichlet grids keep interior nodes
only (``(n-1)**d`` dofs) so that fields vanish on the boundary by
construction. Vector fields are stored per quadrature point, shape
``(ncell, nq, d)``. Quadrature is 2-point Gauss per axis per cell.

Most routines accept a leading batch axis on nodal values, which the cell
solvers use to treat many frozen parameter sets at once.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .errors import DomainError, UsageError
from .nfunction import NFunction

PERIODIC = "periodic"
DIRICHLET = "dirichlet"

_GAUSS = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
GAUSS_POINTS = _GAUSS  # reference 2-point Gauss abscissae on [0, 1]

UNIT_CELL = "cell"
UNIT_BOX = "omega"


@dataclass(frozen=True)
class TensorGrid:
    dim: int
    n: int
    lo: tuple
    hi: tuple
    bc: str

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise UsageError(f"unsupported dimension {self.dim}; only d = 1, 2")
        if self.n < 2:
            raise UsageError("need at least 2 cells per axis")
        if self.bc not in (PERIODIC, DIRICHLET):
            raise UsageError(f"unknown boundary condition {self.bc!r}")
        if len(self.lo) != self.dim or len(self.hi) != self.dim:
            raise UsageError("box bounds must have one entry per axis")

    # -- geometry -----------------------------------------------------------

    @property
    def h(self):
        return np.array([(b - a) / self.n for a, b in zip(self.lo, self.hi)])

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    @property
    def volume(self):
        return float(np.prod([b - a for a, b in zip(self.lo, self.hi)]))

    @property
    def ncell(self):
        return self.n**self.dim

    @property
    def nloc(self):
        return 2**self.dim

    @property
    def nq(self):
        return 2**self.dim

    @property
    def dofs_per_axis(self):
        return self.n if self.bc == PERIODIC else self.n - 1

    @property
    def ndof(self):
        return self.dofs_per_axis**self.dim

    @property
    def periodic(self):
        return self.bc == PERIODIC

    @cached_property
    def _offsets(self):
        # local corner ordering: axis 0 fastest
        return np.array([o[::-1] for o in product((0, 1), repeat=self.dim)], dtype=int)

    @cached_property
    def _cells(self):
        idx = np.indices((self.n,) * self.dim).reshape(self.dim, -1)[::-1].T
        return idx  # (ncell, d) with axis 0 fastest

    def _node_dof(self, node_idx):
        m = self.dofs_per_axis
        if self.periodic:
            node_idx = node_idx % self.n
            valid = np.ones(node_idx.shape[:-1], dtype=bool)
            local = node_idx
        else:
            valid = np.all((node_idx > 0) & (node_idx < self.n), axis=-1)
            local = node_idx - 1
        strides = m ** np.arange(self.dim)
        dof = np.sum(local * strides, axis=-1)
        return np.where(valid, dof, -1)

    @cached_property
    def cell_dofs(self):
        """(ncell, nloc) global dof of each local node, -1 on Dirichlet boundary."""
        nodes = self._cells[:, None, :] + self._offsets[None, :, :]
        return self._node_dof(nodes)

    @cached_property
    def _gather_index(self):
        return np.where(self.cell_dofs < 0, self.ndof, self.cell_dofs)

    @cached_property
    def _ref_quad(self):
        return np.array([q[::-1] for q in product(_GAUSS, repeat=self.dim)])  # (nq, d)

    @cached_property
    def basis(self):
        """(nq, nloc) Q1 basis values at the reference quadrature points."""
        xq = self._ref_quad[:, None, :]
        off = self._offsets[None, :, :]
        return np.prod(np.where(off == 1, xq, 1 - xq), axis=-1)

    @cached_property
    def basis_grad(self):
        """(nq, nloc, d) physical gradients of the Q1 basis."""
        xq = self._ref_quad[:, None, :]
        off = self._offsets[None, :, :]
        vals = np.where(off == 1, xq, 1 - xq)
        dvals = np.where(off == 1, 1.0, -1.0) * np.ones_like(vals)
        out = np.empty((self.nq, self.nloc, self.dim))
        for k in range(self.dim):
            factors = vals.copy()
            factors[..., k] = dvals[..., k]
            out[..., k] = np.prod(factors, axis=-1) / self.h[k]
        return out

    @cached_property
    def quad_weights(self):
        """(nq,) physical weights of one cell."""
        return np.full(self.nq, self.cell_volume / self.nq)

    @cached_property
    def quad_points(self):
        """(ncell, nq, d) physical quadrature coordinates."""
        lo = np.asarray(self.lo)
        return lo + (self._cells[:, None, :] + self._ref_quad[None, :, :]) * self.h

    @cached_property
    def cell_centers(self):
        return np.asarray(self.lo) + (self._cells + 0.5) * self.h

    @cached_property
    def dof_index(self):
        """(ndof, d) integer node index of every dof."""
        m = self.dofs_per_axis
        idx = np.indices((m,) * self.dim).reshape(self.dim, -1)[::-1].T
        return idx if self.periodic else idx + 1

    @cached_property
    def dof_coords(self):
        return np.asarray(self.lo) + self.dof_index * self.h

    @cached_property
    def node_mass(self):
        """Integral of each basis function."""
        w = np.broadcast_to((self.basis * self.quad_weights[:, None]).sum(axis=0), self.cell_dofs.shape)
        return np.bincount(self._gather_index.ravel(), weights=w.ravel(), minlength=self.ndof + 1)[: self.ndof]

    # -- field kernels (leading batch axes allowed) ---------------------------

    def local_values(self, values):
        values = np.asarray(values, dtype=float)
        pad = np.concatenate([values, np.zeros(values.shape[:-1] + (1,))], axis=-1)
        return pad[..., self._gather_index]  # (..., ncell, nloc)

    def values_at_quad(self, values):
        return self.local_values(values) @ self.basis.T  # (..., ncell, nq)

    @cached_property
    def _grad_kernel(self):
        return self.basis_grad.transpose(1, 0, 2).reshape(self.nloc, -1)

    def grad_at_quad(self, values):
        loc = self.local_values(values) @ self._grad_kernel
        return loc.reshape(loc.shape[:-1] + (self.nq, self.dim))

    def scatter(self, local):
        """Sum ``(..., ncell, nloc)`` element contributions into ``(..., ndof)``."""
        lead = local.shape[:-2]
        b = int(np.prod(lead)) if lead else 1
        flat = local.reshape(b, -1)
        idx = np.broadcast_to(self._gather_index.ravel(), flat.shape)
        idx = idx + (self.ndof + 1) * np.arange(b)[:, None]
        out = np.bincount(idx.ravel(), weights=flat.ravel(), minlength=b * (self.ndof + 1))
        return out.reshape(b, self.ndof + 1)[:, : self.ndof].reshape(lead + (self.ndof,))

    def locate(self, points):
        """Cell index and reference coordinates of arbitrary points (periodic wrap when periodic)."""
        pts = np.asarray(points, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if self.periodic:
            pts = lo + np.mod(pts - lo, hi - lo)
        elif np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
            raise DomainError("points outside the grid box")
        s = (pts - lo) / self.h
        c = np.clip(np.floor(s).astype(int), 0, self.n - 1)
        ref = np.clip(s - c, 0.0, 1.0)
        strides = self.n ** np.arange(self.dim)
        return np.sum(c * strides, axis=-1), ref

    def _local_at(self, values, cell, rows):
        if rows is None:
            return self.local_values(values)[..., cell, :]
        values = np.asarray(values, dtype=float)
        pad = np.concatenate([values, np.zeros((values.shape[0], 1))], axis=-1)
        return pad[np.asarray(rows)[..., None], self._gather_index[cell]]

    def interpolate(self, values, points, rows=None):
        """Evaluate the Q1 interpolant of nodal ``values`` at points (..., d).

        With ``rows`` given, ``values`` is a stack (M, ndof) and point ``i`` is
        evaluated on field ``rows[i]``; otherwise leading batch axes of
        ``values`` broadcast over all points.
        """
        cell, ref = self.locate(points)
        off = self._offsets
        shape = np.where(off == 1, ref[..., None, :], 1 - ref[..., None, :]).prod(axis=-1)  # (P, nloc)
        loc = self._local_at(values, cell, rows)
        return np.sum(loc * shape, axis=-1)

    def interpolate_grad(self, values, points, rows=None):
        cell, ref = self.locate(points)
        off = self._offsets
        vals = np.where(off == 1, ref[..., None, :], 1 - ref[..., None, :])
        grads = []
        for k in range(self.dim):
            fac = vals.copy()
            fac[..., k] = np.where(off[..., k] == 1, 1.0, -1.0)
            grads.append(fac.prod(axis=-1) / self.h[k])
        dshape = np.stack(grads, axis=-1)  # (P, nloc, d)
        loc = self._local_at(values, cell, rows)
        return np.sum(loc[..., None] * dshape, axis=-2)

    def refine(self, n):
        return TensorGrid(self.dim, n, self.lo, self.hi, self.bc)

    def to_meta(self):
        return {"dim": self.dim, "n": self.n, "lo": list(self.lo), "hi": list(self.hi), "bc": self.bc}

    @classmethod
    def from_meta(cls, meta):
        return cls(int(meta["dim"]), int(meta["n"]), tuple(float(v) for v in meta["lo"]),
                   tuple(float(v) for v in meta["hi"]), meta["bc"])


def make_grid(dim, n, box=UNIT_CELL, bc=PERIODIC):
    """Uniform grid on the unit cell (-1/2,1/2)^d (``box="cell"``), on (0,1)^d
    (``box="omega"``), or on an explicit ``(lo, hi)`` pair."""
    if dim not in (1, 2):
        raise UsageError(f"unsupported dimension {dim}; only d = 1, 2")
    if box == UNIT_CELL:
        lo, hi = (-0.5,) * dim, (0.5,) * dim
    elif box == UNIT_BOX:
        lo, hi = (0.0,) * dim, (1.0,) * dim
    else:
        lo, hi = tuple(float(v) for v in box[0]), tuple(float(v) for v in box[1])
    return TensorGrid(int(dim), int(n), lo, hi, bc)


def cell_grid(dim, n):
    return make_grid(dim, n, UNIT_CELL, PERIODIC)


def omega_grid(dim, n):
    return make_grid(dim, n, UNIT_BOX, DIRICHLET)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: TensorGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.ndof,):
            raise UsageError(f"expected {self.grid.ndof} nodal values, got shape {vals.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid, fn):
        """Nodal interpolant of ``fn(points[..., d])``."""
        return cls(grid, np.asarray(fn(grid.dof_coords), dtype=float))

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.ndof, float(c)))

    def at_quad(self):
        return self.grid.values_at_quad(self.values)

    def __call__(self, points):
        return self.grid.interpolate(self.values, points)

    def __add__(self, other):
        return ScalarField(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - _vals(other))

    def __mul__(self, c):
        return ScalarField(self.grid, self.values * float(c))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: TensorGrid
    values: np.ndarray  # (ncell, nq, d)

    def magnitude(self):
        return np.linalg.norm(self.values, axis=-1)

    def component(self, i):
        return self.values[..., i]


def _vals(other):
    return other.values if isinstance(other, ScalarField) else other


def gradient(u):
    return VectorField(u.grid, u.grid.grad_at_quad(u.values))


def _quad_values(u, grid=None):
    """Values of ``u`` at quadrature points, for any accepted integrand form."""
    if isinstance(u, ScalarField):
        return u.grid, u.at_quad()
    if isinstance(u, VectorField):
        return u.grid, u.values
    if grid is None:
        raise UsageError("a grid is required to integrate a pointwise function")
    if callable(u):
        return grid, np.asarray(u(grid.quad_points), dtype=float)
    return grid, np.asarray(u, dtype=float)


def integrate(u, grid=None):
    """Gauss quadrature of a ScalarField, VectorField (componentwise), callable, or
    an array of quadrature-point values shaped ``(ncell, nq, ...)``."""
    grid, q = _quad_values(u, grid)
    w = grid.quad_weights
    if q.ndim == 2:
        return float(np.sum(q * w))
    return np.einsum("cq...,q->...", q, w)


def mean(u, grid=None):
    grid, _ = _quad_values(u, grid)
    return integrate(u, grid) / grid.volume


def zero_mean_project(u):
    if not u.grid.periodic:
        raise UsageError("zero-mean projection needs a periodic grid")
    return ScalarField(u.grid, u.values - integrate(u) / u.grid.volume)


def _luxemburg(qvals, weights, nf):
    a = np.abs(np.asarray(qvals, dtype=float))
    if not np.all(np.isfinite(a)):
        raise DomainError("field has non-finite values")
    big = float(a.max()) if a.size else 0.0
    if big == 0.0:
        return 0.0
    w = np.broadcast_to(weights, a.shape)

    def modular(k):
        return float(np.sum(w * nf.value(a / k)))

    m = max(1.0, big)
    lo, hi = 1e-14 * m, 10.0 * m
    while modular(hi) > 1.0:
        lo, hi = hi, hi * 10.0
    while modular(lo) <= 1.0:
        lo, hi = lo * 1e-3, lo
    # bisection in log k; the modular is nonincreasing in k
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if not lo < mid < hi or hi - lo <= 1e-15 * hi:
            break
        if modular(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return hi


def luxemburg_norm(u, nf: NFunction, grid=None):
    """``inf{k > 0 : integral Phi(|u|/k) <= 1}`` for a scalar field, the Euclidean
    magnitude of a vector field, a callable, or quadrature-point values."""
    if isinstance(u, VectorField):
        return _luxemburg(u.magnitude(), u.grid.quad_weights, nf)
    grid, q = _quad_values(u, grid)
    if q.ndim == 3:
        q = np.linalg.norm(q, axis=-1)
    return _luxemburg(q, grid.quad_weights, nf)


def orlicz_sobolev_norm(u, nf):
    """``||u||_Phi + sum_i ||d_i u||_Phi``."""
    g = gradient(u).values
    total = luxemburg_norm(u, nf)
    for i in range(u.grid.dim):
        total += _luxemburg(g[..., i], u.grid.quad_weights, nf)
    return total


def l2_norm(u, grid=None):
    grid, q = _quad_values(u, grid)
    if q.ndim == 3:
        q = np.sum(q**2, axis=-1)
    else:
        q = q**2
    return math.sqrt(float(np.sum(q * grid.quad_weights)))


def h1_norm(u):
    """``||u||_2 + sum_i ||d_i u||_2``, the component-sum form used for W^1 norms."""
    g = gradient(u).values
    return l2_norm(u) + sum(
        math.sqrt(float(np.sum(g[..., i] ** 2 * u.grid.quad_weights))) for i in range(u.grid.dim)
    )


def transfer(u, target):
    """Nodal interpolation of a field onto another grid over the same box."""
    return ScalarField(target, u.grid.interpolate(u.values, target.dof_coords))


# -- serialization ----------------------------------------------------------


def write_field(field, csv_path, json_path=None):
    """CSV with one dof per row (node indices, value) plus a JSON grid header."""
    g = field.grid
    json_path = json_path or str(csv_path) + ".json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{k + 1}" for k in range(g.dim)] + ["value"])
        for idx, v in zip(g.dof_index, field.values):
            w.writerow([int(i) for i in idx] + [repr(float(v))])
    with open(json_path, "w") as fh:
        json.dump({"grid": g.to_meta(), "ndof": g.ndof}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_field(csv_path, json_path=None):
    json_path = json_path or str(csv_path) + ".json"
    with open(json_path) as fh:
        meta = json.load(fh)
    grid = TensorGrid.from_meta(meta["grid"])
    lookup = {tuple(int(i) for i in idx): k for k, idx in enumerate(grid.dof_index)}
    values = np.full(grid.ndof, np.nan)
    with open(csv_path, newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for row in rows:
            values[lookup[tuple(int(v) for v in row[: grid.dim])]] = float(row[grid.dim])
    if np.any(np.isnan(values)):
        raise UsageError(f"{csv_path} does not cover every dof")
    return ScalarField(grid, values)
