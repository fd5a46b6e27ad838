"""Periodic cell problems and the effective flux.

The inner problem freezes ``(y, r, xi)`` and finds a zero-mean periodic
``pi2`` on Z with ``int_Z a(y, z, r, xi + D pi2) . D theta = 0``; its average
flux is ``h(y, r, xi)``. The outer problem finds ``pi1`` on Y with
``int_Y h(y, r, xi + D pi1) . D theta = 0``; its average is ``q(r, xi)``.

Inner problems are always solved in batches: every quadrature point of the
outer grid is one block of a block-diagonal Newton system. After each batch
solve the consistent tangents ``dh/dxi`` and ``dh/dr`` are obtained from one
factorization of the inner stiffness, which gives the outer Newton iteration
its exact Jacobian.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .errors import ConvergenceError, OutOfRangeError, UsageError
from .grid import ScalarField, TensorGrid, cell_grid
from .newton import SolveOptions, solve_monotone_system

log = logging.getLogger(__name__)

PICARD_SWEEPS = 12
DEFAULT_R = (-2.0, 2.0, 9)
DEFAULT_XI = (-2.0, 2.0, 17)


@dataclass
class CellSolution:
    """Solution of one frozen-parameter cell problem.

    ``dflux_dxi`` (d, d) and ``dflux_dr`` (d,) are the consistent tangents of
    the averaged flux. Outer solutions also keep the inner correctors solved
    at the outer quadrature points (``inner``, shape (ncell*nq, ndof_Z)).
    """

    corrector: ScalarField
    frozen: tuple
    averaged_flux: np.ndarray
    residual_norm: float
    iterations: int
    dflux_dxi: Optional[np.ndarray] = None
    dflux_dr: Optional[np.ndarray] = None
    inner: Optional[np.ndarray] = None
    inner_grid: Optional[TensorGrid] = None
    inner_xi: Optional[np.ndarray] = None


def _threads(default=1):
    try:
        return max(1, int(os.environ.get("HOMOG_THREADS", default)))
    except ValueError:
        return default


def _check_periodic(a, *grids):
    for g in grids:
        if not g.periodic:
            raise UsageError("cell problems need periodic grids")
        if g.dim != a.dim:
            raise UsageError(f"grid dimension {g.dim} does not match flux dimension {a.dim}")
    if not a.periodic:
        raise UsageError("cell problems need a flux periodic in y and z")


def _inner_tol(opts):
    return max(opts.tol * 1e-2, 1e-13)


def _pinned_solver(mat, pinned):
    """Factor ``mat`` with the pinned rows and columns removed."""
    n = mat.shape[0]
    keep = np.ones(n, dtype=bool)
    keep[pinned] = False
    lu = spla.splu(mat[keep][:, keep].tocsc(), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})

    def solve(rhs):
        out = np.zeros(rhs.shape)
        out[keep] = lu.solve(np.ascontiguousarray(rhs[keep]))
        return out

    return solve


class _InnerBatch:
    """Inner cell problems at ``B`` frozen parameter sets on one Z grid."""

    def __init__(self, a, grid, ys, r, jac_mode="analytic"):
        self.a, self.grid, self.mode = a, grid, jac_mode
        self.B = ys.shape[0]
        self.m = grid.ndof
        self.y = ys[:, None, None, :]
        self.zeta = np.broadcast_to(np.asarray(r, dtype=float), (self.B,))[:, None, None]
        self.z = grid.quad_points[None]
        self.w = grid.quad_weights
        self.pinned = np.arange(self.B) * self.m
        self._lu = (None, None)

    def factor(self, jmat):
        """Pinned factorization of the tangent, reused while ``jmat`` is unchanged."""
        cached, solve = self._lu
        if cached is not None and cached.shape == jmat.shape and np.array_equal(cached, jmat):
            return solve
        try:
            solve = _pinned_solver(fem.tangent(self.grid, jmat), self.pinned)
        except RuntimeError:
            raise ConvergenceError("singular linearization in inner cell problem") from None
        self._lu = (jmat, solve)
        return solve

    def lam(self, x, xis):
        return xis[:, None, None, :] + self.grid.grad_at_quad(x.reshape(self.B, self.m))

    def flux(self, lam):
        return self.a(self.y, self.z, self.zeta, lam)

    def jac(self, lam):
        return self.a.jacobian(self.y, self.z, self.zeta, lam, self.mode)

    def average(self, vals):
        return np.einsum("bcq...,q->b...", vals, self.w)

    def project(self, dx):
        v = dx.reshape(self.B, self.m)
        return (v - v.mean(axis=1, keepdims=True)).ravel()

    def solve(self, xis, opts, init=None):
        x0 = np.zeros(self.B * self.m) if init is None else np.array(init, dtype=float).ravel()

        def residual(x):
            return fem.residual(self.grid, self.flux(self.lam(x, xis))).ravel()

        def jac(x):
            return fem.tangent(self.grid, self.jac(self.lam(x, xis)))

        def step(x, r):
            return self.factor(self.jac(self.lam(x, xis)))(-r)

        kw = dict(blocks=self.B, pinned=self.pinned, project=self.project)
        if opts.linear_solver == "direct":
            kw["step"] = step
        try:
            return solve_monotone_system(residual, x0, opts, jac, **kw)
        except ConvergenceError as exc:
            log.info("inner Newton failed (%s); Picard restart", exc)
            x1 = self.picard(xis, x0)
            try:
                return solve_monotone_system(residual, x1, opts, jac, **kw)
            except ConvergenceError as exc2:
                raise ConvergenceError(
                    f"inner cell solve failed after Picard restart: {exc2}",
                    exc2.residual, exc2.trace, where=self._where(residual(x1), xis),
                ) from None

    def _where(self, r, xis):
        k = int(np.argmax(np.linalg.norm(r.reshape(self.B, self.m), axis=1)))
        return {"y": self.y[k, 0, 0].tolist(), "r": float(self.zeta[k, 0, 0]), "xi": xis[k].tolist()}

    def picard(self, xis, x0):
        """Frozen secant-coefficient sweeps: solve ``int s (xi + D pi) . D theta = 0``."""
        x = x0.copy()
        for _ in range(PICARD_SWEEPS):
            lam = self.lam(x, xis)
            t = np.linalg.norm(lam, axis=-1)
            s = np.linalg.norm(self.flux(lam), axis=-1) / np.maximum(t, 1e-300)
            s = np.maximum(s, 1e-8 * max(float(s.max()), 1e-300))
            eye = np.eye(self.grid.dim)
            mat = fem.tangent(self.grid, s[..., None, None] * eye)
            rhs = -fem.residual(self.grid, s[..., None] * xis[:, None, None, :]).ravel()
            try:
                x = self.project(_pinned_solver(mat, self.pinned)(rhs))
            except RuntimeError:
                break
        return x

    def tangents(self, x, xis):
        """Averaged flux and its consistent derivatives at a converged batch."""
        d = self.grid.dim
        lam = self.lam(x, xis)
        flux = self.flux(lam)
        jmat = self.jac(lam)
        h = self.average(flux)
        solve = self.factor(jmat)
        cols = [fem.residual(self.grid, jmat[..., :, k]).ravel() for k in range(d)]
        dzeta = None
        if self.a.depends_on_zeta:
            dzeta = self.a.zeta_derivative(self.y, self.z, self.zeta, lam, self.mode)
            cols.append(fem.residual(self.grid, dzeta).ravel())
        chi = solve(-np.column_stack(cols))
        dh_dxi = np.empty((self.B, d, d))
        for k in range(d):
            g = self.grid.grad_at_quad(chi[:, k].reshape(self.B, self.m))
            dh_dxi[:, :, k] = self.average(jmat[..., :, k] + np.einsum("...ij,...j->...i", jmat, g))
        dh_dr = np.zeros((self.B, d))
        if dzeta is not None:
            g = self.grid.grad_at_quad(chi[:, d].reshape(self.B, self.m))
            dh_dr = self.average(dzeta + np.einsum("...ij,...j->...i", jmat, g))
        return h, dh_dxi, dh_dr


def _as_points(v, d, what):
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (d,):
        raise UsageError(f"{what} must have {d} components")
    return arr


def solve_inner_batch(a, ys, r, xis, grid_Z, opts=None, init=None):
    """Solve inner cell problems at many frozen ``(y_b, r_b, xi_b)`` at once.

    Returns:
        ``(correctors (B, ndof), h (B, d), dh_dxi (B, d, d), dh_dr (B, d), newton)``.
    """
    _check_periodic(a, grid_Z)
    opts = opts or SolveOptions()
    ys = np.asarray(ys, dtype=float).reshape(-1, a.dim)
    xis = np.asarray(xis, dtype=float).reshape(-1, a.dim)
    batch = _InnerBatch(a, grid_Z, ys, r, opts.jacobian)
    res = batch.solve(xis, opts, init)
    h, dxi, dr = batch.tangents(res.solution, xis)
    return res.solution.reshape(batch.B, batch.m), h, dxi, dr, res


def solve_inner_cell(a, y, r, xi, grid_Z, opts=None, init=None):
    """Inner corrector ``pi2(y, r, xi)``; ``averaged_flux`` is ``h(y, r, xi)``."""
    d = a.dim
    y = _as_points(y, d, "y")
    xi = _as_points(xi, d, "xi")
    pi, h, dxi, dr, res = solve_inner_batch(a, y[None], float(r), xi[None], grid_Z, opts, init)
    return CellSolution(
        ScalarField(grid_Z, pi[0]), (y, float(r), xi), h[0], res.residual_norm, res.iterations,
        dflux_dxi=dxi[0], dflux_dr=dr[0],
    )


def eval_h(a, y, r, xi, grid_Z, opts=None):
    return solve_inner_cell(a, y, r, xi, grid_Z, opts).averaged_flux


def _grids(grids, d):
    if isinstance(grids, dict):
        gy, gz = grids.get("Y", 64), grids.get("Z", 64)
    else:
        gy, gz = grids
    gy = cell_grid(d, gy) if isinstance(gy, (int, np.integer)) else gy
    gz = cell_grid(d, gz) if isinstance(gz, (int, np.integer)) else gz
    return gy, gz


def solve_outer_cell(a, r, xi, grids, opts=None, init=None):
    """Outer corrector ``pi1(r, xi)``; ``averaged_flux`` is ``q(r, xi)``.

    Args:
        grids: ``(grid_Y, grid_Z)``, or a dict with keys ``"Y"``/``"Z"`` holding
            grids or cell counts.
    """
    d = a.dim
    grid_Y, grid_Z = _grids(grids, d)
    _check_periodic(a, grid_Y, grid_Z)
    opts = opts or SolveOptions()
    inner_opts = opts.with_(tol=_inner_tol(opts))
    xi = _as_points(xi, d, "xi")
    r = float(r)
    ys = grid_Y.quad_points.reshape(-1, d)
    shape = (grid_Y.ncell, grid_Y.nq)
    batch = _InnerBatch(a, grid_Z, ys, r, opts.jacobian)
    state = {"key": None, "warm": None}

    def evaluate(x):
        key = x.tobytes()
        if state["key"] == key:
            return state["val"]
        lam = (xi + grid_Y.grad_at_quad(x)).reshape(-1, d)
        try:
            res = batch.solve(lam, inner_opts, state["warm"])
        except ConvergenceError as exc:
            exc.where = dict(exc.where or {}, level="inner")
            raise
        h, dxi, dr = batch.tangents(res.solution, lam)
        state.update(key=key, warm=res.solution, val=(res.solution, lam, h, dxi, dr))
        return state["val"]

    def residual(x):
        h = evaluate(x)[2]
        return fem.residual(grid_Y, h.reshape(shape + (d,)))

    def jac(x):
        dxi = evaluate(x)[3]
        return fem.tangent(grid_Y, dxi.reshape(shape + (d, d)))

    x0 = np.zeros(grid_Y.ndof) if init is None else np.array(init, dtype=float)
    res = solve_monotone_system(
        residual, x0, opts, jac, pinned=np.array([0]), project=lambda v: v - v.mean()
    )
    inner, lam, h, dxi, dr = evaluate(res.solution)
    w = np.tile(grid_Y.quad_weights, grid_Y.ncell)
    # tangent of q: the outer corrector responds to xi and r through the outer stiffness
    kmat = fem.tangent(grid_Y, dxi.reshape(shape + (d, d)))
    solve = _pinned_solver(kmat, np.array([0]))
    cols = [fem.residual(grid_Y, dxi[:, :, k].reshape(shape + (d,))) for k in range(d)]
    cols.append(fem.residual(grid_Y, dr.reshape(shape + (d,))))
    chi = solve(-np.column_stack(cols))
    dq_dxi = np.empty((d, d))
    for k in range(d):
        g = grid_Y.grad_at_quad(chi[:, k]).reshape(-1, d)
        dq_dxi[:, k] = np.einsum("b,bi->i", w, dxi[:, :, k] + np.einsum("bij,bj->bi", dxi, g))
    g = grid_Y.grad_at_quad(chi[:, d]).reshape(-1, d)
    dq_dr = np.einsum("b,bi->i", w, dr + np.einsum("bij,bj->bi", dxi, g))
    q = np.einsum("b,bi->i", w, h)
    return CellSolution(
        ScalarField(grid_Y, res.solution), (None, r, xi), q, res.residual_norm, res.iterations,
        dflux_dxi=dq_dxi, dflux_dr=dq_dr, inner=inner.reshape(batch.B, batch.m),
        inner_grid=grid_Z, inner_xi=lam,
    )


def eval_q(a, r, xi, grids, opts=None):
    return solve_outer_cell(a, r, xi, grids, opts).averaged_flux


# -- tabulated effective flux ---------------------------------------------------


@dataclass
class EffectiveFluxTable:
    """``q`` sampled on ``r_grid x xi_axes[0] x ... x xi_axes[d-1]``.

    ``values`` has shape ``(nr, nxi, ..., nxi, d)``; ``residual`` stores the
    outer residual norm of each node.
    """

    r_grid: np.ndarray
    xi_axes: tuple
    values: np.ndarray
    residual: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self):
        return len(self.xi_axes)

    @property
    def axes(self):
        return (self.r_grid,) + tuple(self.xi_axes)

    def __call__(self, r, xi):
        return interp_q(self, r, xi)

    def evaluate(self, r, xi):
        """Vectorized interpolation with derivatives.

        Args:
            r: (P,) values.
            xi: (P, d) values.

        Returns:
            ``(q (P, d), dq_dr (P, d), dq_dxi (P, d, d))``.

        Raises:
            OutOfRangeError: any query outside the tabulated box.
        """
        r = np.atleast_1d(np.asarray(r, dtype=float))
        xi = np.asarray(xi, dtype=float).reshape(r.shape[0], self.dim)
        pts = np.column_stack([r, xi])
        axes = self.axes
        idx, frac, inv_h = [], [], []
        for k, ax in enumerate(axes):
            p = pts[:, k]
            bad = (p < ax[0]) | (p > ax[-1]) | ~np.isfinite(p)
            if bad.any():
                j = int(np.argmax(bad))
                raise OutOfRangeError(
                    f"query {pts[j].tolist()} lies outside the tabulated box "
                    f"{[(float(a[0]), float(a[-1])) for a in axes]}; re-tabulate with a larger box"
                )
            i = np.clip(np.searchsorted(ax, p, side="right") - 1, 0, len(ax) - 2)
            hk = ax[i + 1] - ax[i]
            idx.append(i)
            frac.append((p - ax[i]) / hk)
            inv_h.append(1.0 / hk)
        nk = len(axes)
        val = np.zeros((r.shape[0], self.dim))
        grad = np.zeros((r.shape[0], nk, self.dim))
        for corner in product((0, 1), repeat=nk):
            node = self.values[tuple(idx[k] + corner[k] for k in range(nk))]
            wts = [frac[k] if corner[k] else 1.0 - frac[k] for k in range(nk)]
            val += np.prod(wts, axis=0)[:, None] * node
            for k in range(nk):
                others = np.prod([wts[j] for j in range(nk) if j != k], axis=0) if nk > 1 else 1.0
                sign = inv_h[k] if corner[k] else -inv_h[k]
                grad[:, k, :] += (others * sign)[:, None] * node
        return val, grad[:, 0, :], np.swapaxes(grad[:, 1:, :], 1, 2)

    def write(self, csv_path, json_path=None):
        d = self.dim
        header = ["r"] + [f"xi{k + 1}" for k in range(d)] + [f"q{k + 1}" for k in range(d)] + ["residual"]
        with open(csv_path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(header)
            for node in np.ndindex(*self.values.shape[:-1]):
                coords = [self.axes[k][node[k]] for k in range(d + 1)]
                row = coords + list(self.values[node]) + [self.residual[node]]
                out.writerow([repr(float(v)) for v in row])
        meta = {
            "r_grid": [float(v) for v in self.r_grid],
            "xi_axes": [[float(v) for v in ax] for ax in self.xi_axes],
            "provenance": self.provenance,
        }
        with open(json_path or csv_path + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, csv_path, json_path=None):
        with open(json_path or csv_path + ".json") as fh:
            meta = json.load(fh)
        r_grid = np.array(meta["r_grid"])
        xi_axes = tuple(np.array(ax) for ax in meta["xi_axes"])
        d = len(xi_axes)
        shape = (len(r_grid),) + tuple(len(ax) for ax in xi_axes)
        rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        values = rows[:, d + 1 : 2 * d + 1].reshape(shape + (d,))
        residual = rows[:, -1].reshape(shape)
        return cls(r_grid, xi_axes, values, residual, meta.get("provenance", {}))


def interp_q(table: EffectiveFluxTable, r, xi):
    """Multilinear interpolation of the table at one ``(r, xi)``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return table.evaluate(np.array([float(r)]), xi[None])[0][0]


def tabulate_q(a, r_grid=None, xi_box=None, xi_n=None, grids=None, opts=None, workers=None):
    """Evaluate ``q`` on a tensor grid of ``(r, xi)`` nodes.

    Args:
        r_grid: sorted r nodes; default 9 nodes on [-2, 2].
        xi_box: ``(lo, hi)`` of the xi box (same on every axis); default (-2, 2).
        xi_n: nodes per xi axis; default 17.
        grids: cell grids as accepted by :func:`solve_outer_cell`.
        workers: thread count; defaults to ``HOMOG_THREADS`` or 1.

    Nodes are solved independently from a zero corrector, so the result does
    not depend on scheduling. For fluxes independent of the unknown a single
    r-slice is solved and copied.
    """
    d = a.dim
    opts = opts or SolveOptions()
    if r_grid is None:
        r_grid = np.linspace(*DEFAULT_R[:2], DEFAULT_R[2])
    r_grid = np.sort(np.asarray(r_grid, dtype=float))
    lo, hi = xi_box if xi_box is not None else DEFAULT_XI[:2]
    n = int(xi_n or DEFAULT_XI[2])
    if not (lo < 0 < hi):
        raise UsageError("the xi box must contain 0 in its interior")
    if r_grid.size < 2 or n < 2:
        raise UsageError("need at least two nodes per table axis")
    axis = np.linspace(lo, hi, n)
    xi_axes = (axis,) * d
    gy, gz = _grids(grids or {}, d)
    slices = r_grid[:1] if not a.depends_on_zeta else r_grid
    nodes = [(i, j) for i in range(len(slices)) for j in np.ndindex(*(n,) * d)]

    def work(node):
        i, j = node
        xi = np.array([axis[k] for k in j])
        if a.zero_at_zero and not xi.any():
            return np.zeros(d), 0.0
        try:
            sol = solve_outer_cell(a, slices[i], xi, (gy, gz), opts)
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"table node r={slices[i]!r}, xi={xi.tolist()} failed: {exc}", exc.residual, exc.trace,
                where={"r": float(slices[i]), "xi": xi.tolist()},
            ) from None
        return sol.averaged_flux, sol.residual_norm

    nw = workers or _threads()
    if nw > 1:
        with ThreadPoolExecutor(nw) as pool:
            out = list(pool.map(work, nodes))
    else:
        out = [work(nd) for nd in nodes]
    vals = np.empty((len(slices),) + (n,) * d + (d,))
    res = np.empty((len(slices),) + (n,) * d)
    for (i, j), (q, rn) in zip(nodes, out):
        vals[(i,) + j] = q
        res[(i,) + j] = rn
    if len(slices) < len(r_grid):
        vals = np.repeat(vals, len(r_grid), axis=0)
        res = np.repeat(res, len(r_grid), axis=0)
    prov = {
        "flux": a.config or {"family": a.name},
        "grids": {"Y": gy.n, "Z": gz.n},
        "solver": {k: getattr(opts, k) for k in opts.__dataclass_fields__},
        "r_slices_solved": int(len(slices)),
    }
    return EffectiveFluxTable(r_grid, xi_axes, vals, res, prov)
