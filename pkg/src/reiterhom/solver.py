"""Macroscopic and fine-scale solvers, and corrector reconstruction.

``solve_macro`` solves ``-div q(u0, Du0) = f`` with homogeneous Dirichlet
data, ``q`` coming from a tabulated effective flux or any callable with the
same signature as :meth:`EffectiveFluxTable.evaluate`. ``solve_fine`` solves
the oscillating problem ``-div a(x/eps, x/eps^2, u, Du) = f`` directly on a
grid that resolves the finest period.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import fem
from .cell import _grids, solve_outer_cell
from .errors import ConvergenceError, OutOfRangeError, UsageError
from .expr import PointMap, wrap_cell
from .grid import GAUSS_POINTS, ScalarField, TensorGrid, integrate, omega_grid
from .newton import NewtonResult, SolveOptions, linear_step, solve_monotone_system

__all__ = [
    "SolveOptions",
    "NewtonResult",
    "solve_monotone_system",
    "solve_macro",
    "solve_fine",
    "direct_q_source",
    "HomogTriple",
    "homog_triple",
    "reconstruct",
    "boundary_cutoff",
    "fine_grid_for",
    "energy_terms",
    "fine_energy",
    "macro_energy",
    "source_at_quad",
]

log = logging.getLogger(__name__)

CELLS_PER_PERIOD = 8


def source_at_quad(f, grid: TensorGrid):
    """Values of a right-hand side at the quadrature points, shape (ncell, nq).

    ``f`` may be a number, an expression in ``x1, x2``, a callable on point
    arrays, or a :class:`ScalarField`.
    """
    if isinstance(f, ScalarField):
        return f.grid.interpolate(f.values, grid.quad_points)
    if isinstance(f, (int, float, np.floating, np.integer)):
        vals = np.full((grid.ncell, grid.nq), float(f))
    elif isinstance(f, str):
        vals = PointMap(f, "x", grid.dim)(grid.quad_points)
    elif callable(f):
        vals = np.broadcast_to(np.asarray(f(grid.quad_points), dtype=float), (grid.ncell, grid.nq))
    else:
        raise UsageError(f"cannot interpret right-hand side {f!r}")
    if not np.all(np.isfinite(vals)):
        raise UsageError("right-hand side is not finite on the grid")
    return np.array(vals, dtype=float)


def _check_dirichlet(grid):
    if grid.periodic:
        raise UsageError("macroscopic and fine problems need a Dirichlet grid")


def _q_eval(q_source):
    if hasattr(q_source, "evaluate"):
        return q_source.evaluate
    if callable(q_source):
        return q_source
    raise UsageError("q_source must be an EffectiveFluxTable or a callable")


def direct_q_source(a, grids, opts=None):
    """Callable ``(r, xi) -> (q, dq_dr, dq_dxi)`` backed by nested cell solves.

    Results are cached on exact parameter values. Expensive: every new
    quadrature-point state costs one outer solve with its inner batch.
    """
    cache = {}
    grids = _grids(grids, a.dim)

    def evaluate(r, xi):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        xi = np.asarray(xi, dtype=float).reshape(r.size, a.dim)
        q = np.empty((r.size, a.dim))
        dr = np.empty((r.size, a.dim))
        dxi = np.empty((r.size, a.dim, a.dim))
        for i in range(r.size):
            key = (float(r[i]),) + tuple(xi[i].tolist())
            if key not in cache:
                sol = solve_outer_cell(a, r[i], xi[i], grids, opts)
                cache[key] = (sol.averaged_flux, sol.dflux_dr, sol.dflux_dxi)
            q[i], dr[i], dxi[i] = cache[key]
        return q, dr, dxi

    return evaluate


def _initial_guess(qfun, fq, grid, d):
    """Poisson solve scaled by the effective slope of ``q`` along the first axis."""
    for s in (1.0, 0.5, 0.1):
        try:
            e = np.zeros((1, d))
            e[0, 0] = s
            kappa = float(qfun(np.zeros(1), e)[0][0, 0]) / s
            break
        except OutOfRangeError:
            continue
    else:
        return np.zeros(grid.ndof)
    if not kappa > 0 or not math.isfinite(kappa):
        return np.zeros(grid.ndof)
    return linear_step(fem.stiffness(grid) * kappa, fem.load_vector(grid, fq))


def solve_macro(q_source, f, grid: TensorGrid, opts=None, init=None, full_output=False):
    """Solve the homogenized problem ``int q(u0, Du0) . Dv = int f v``.

    Args:
        q_source: :class:`EffectiveFluxTable` or callable ``(r, xi) -> (q, dq_dr, dq_dxi)``.
        f: right-hand side, see :func:`source_at_quad`.
        grid: Dirichlet grid on Omega.
        init: initial nodal values; default is a scaled Poisson solve.
        full_output: also return the :class:`NewtonResult`.

    Raises:
        OutOfRangeError: the iteration needs ``q`` outside the table box.
        ConvergenceError: Newton failure.
    """
    _check_dirichlet(grid)
    opts = opts or SolveOptions()
    qfun = _q_eval(q_source)
    fq = source_at_quad(f, grid)
    d = grid.dim
    shape = (grid.ncell, grid.nq)
    hull = {"error": None}

    def state(x):
        r = grid.values_at_quad(x).ravel()
        xi = grid.grad_at_quad(x).reshape(-1, d)
        try:
            return qfun(r, xi)
        except OutOfRangeError as exc:
            hull["error"] = exc
            raise

    def residual(x):
        q = state(x)[0]
        return fem.residual(grid, q.reshape(shape + (d,)), fq)

    def jac(x):
        _, dr, dxi = state(x)
        return fem.tangent(grid, dxi.reshape(shape + (d, d)), dr.reshape(shape + (d,)))

    if init is None:
        x0 = _initial_guess(qfun, fq, grid, d)
        try:
            residual(x0)
        except OutOfRangeError:
            x0 = np.zeros(grid.ndof)
    else:
        x0 = init.values if isinstance(init, ScalarField) else np.asarray(init, dtype=float)
    try:
        res = solve_monotone_system(residual, x0, opts, jac)
    except ConvergenceError as exc:
        if hull["error"] is not None:
            raise OutOfRangeError(f"macroscopic Newton left the tabulated box: {hull['error']}") from None
        raise exc
    u = ScalarField(grid, res.solution)
    return (u, res) if full_output else u


def fine_grid_for(eps, dim=1, n=None):
    """Smallest power-of-two Omega grid with at least 8 cells per eps^2 period."""
    need = CELLS_PER_PERIOD / eps**2
    m = 2 ** math.ceil(math.log2(need - 1e-9))
    return omega_grid(dim, max(int(n or 0), m))


def _check_resolution(grid, eps):
    if not 0 < eps <= 1:
        raise UsageError("eps must lie in (0, 1]")
    if grid.h.max() > eps**2 / CELLS_PER_PERIOD * (1 + 1e-12):
        raise UsageError(
            f"grid spacing {grid.h.max():.3g} does not resolve eps^2/{CELLS_PER_PERIOD} = "
            f"{eps**2 / CELLS_PER_PERIOD:.3g}; refine to n >= {math.ceil(CELLS_PER_PERIOD / eps**2)}"
        )


def _fine_points(grid, eps):
    x = grid.quad_points
    return x / eps, x / eps**2


def _secant_guess(a, y, z, fq, grid):
    """Linear solve with the frozen secant coefficient ``|a(y, z, 0, e1)|``.

    Avoids starting Newton where the tangent degenerates (``phi'(0) = 0``).
    """
    e = np.zeros(grid.dim)
    e[0] = 1.0
    s = np.linalg.norm(a(y, z, np.zeros(y.shape[:-1]), np.broadcast_to(e, y.shape)), axis=-1)
    s = np.maximum(s, 1e-8 * max(float(s.max()), 1e-300))
    try:
        return linear_step(fem.stiffness(grid, s), fem.load_vector(grid, fq))
    except ConvergenceError:
        return np.zeros(grid.ndof)


def solve_fine(a, eps, f, grid: TensorGrid, opts=None, init=None, full_output=False):
    """Solve ``int a(x/eps, x/eps^2, u, Du) . Dv = int f v`` on a resolving grid.

    Raises:
        UsageError: the grid spacing exceeds ``eps**2 / 8``.
    """
    _check_dirichlet(grid)
    _check_resolution(grid, eps)
    if grid.dim != a.dim:
        raise UsageError("grid and flux dimensions differ")
    opts = opts or SolveOptions()
    fq = source_at_quad(f, grid)
    y, z = _fine_points(grid, eps)

    def fields(x):
        return grid.values_at_quad(x), grid.grad_at_quad(x)

    def residual(x):
        u, g = fields(x)
        return fem.residual(grid, a(y, z, u, g), fq)

    def jac(x):
        u, g = fields(x)
        dz = a.zeta_derivative(y, z, u, g, opts.jacobian) if a.depends_on_zeta else None
        return fem.tangent(grid, a.jacobian(y, z, u, g, opts.jacobian), dz)

    if init is None:
        x0 = _secant_guess(a, y, z, fq, grid)
    else:
        x0 = np.asarray(getattr(init, "values", init), dtype=float)
    res = solve_monotone_system(residual, x0, opts, jac)
    u = ScalarField(grid, res.solution)
    return (u, res) if full_output else u


def energy_terms(flux_q, u: ScalarField, f):
    """``(int flux . Du, int f u)`` for quadrature-point flux values (ncell, nq, d)."""
    g = u.grid.grad_at_quad(u.values)
    work = integrate(np.sum(flux_q * g, axis=-1), u.grid)
    load = integrate(source_at_quad(f, u.grid) * u.at_quad(), u.grid)
    return work, load


def fine_energy(a, eps, u: ScalarField, f):
    y, z = _fine_points(u.grid, eps)
    flux = a(y, z, u.at_quad(), u.grid.grad_at_quad(u.values))
    return energy_terms(flux, u, f)


def macro_energy(q_source, u: ScalarField, f):
    grid = u.grid
    q = _q_eval(q_source)(grid.values_at_quad(u.values).ravel(), grid.grad_at_quad(u.values).reshape(-1, grid.dim))[0]
    return energy_terms(q.reshape(grid.ncell, grid.nq, grid.dim), u, f)


# -- correctors ------------------------------------------------------------------


def _axis_weights(coord, positions, period=None):
    """Linear interpolation on sorted 1D ``positions``: (left index, right index, weight of right).

    With ``period`` the lattice wraps; otherwise queries are clamped to its ends.
    """
    m = len(positions)
    i0 = np.searchsorted(positions, coord, side="right") - 1
    if period is None:
        i0 = np.clip(i0, 0, m - 2)
        i1 = i0 + 1
        f = np.clip((coord - positions[i0]) / (positions[i1] - positions[i0]), 0.0, 1.0)
        return i0, i1, f
    i0 = np.where(i0 < 0, m - 1, i0)
    i1 = (i0 + 1) % m
    left = np.where(coord < positions[0], positions[-1] - period, positions[i0])
    right = np.where(i1 == 0, positions[0] + np.where(coord < positions[0], 0.0, period), positions[i1])
    return i0, i1, (coord - left) / (right - left)


def _tensor_weights(per_axis):
    """Corner indices (per axis) and weights of a tensor-product linear interpolation."""
    out = []
    for corner in product((0, 1), repeat=len(per_axis)):
        idx = [ax[1] if b else ax[0] for ax, b in zip(per_axis, corner)]
        w = np.prod([ax[2] if b else 1.0 - ax[2] for ax, b in zip(per_axis, corner)], axis=0)
        out.append((idx, w))
    return out


@dataclass
class HomogTriple:
    """``(u0, u1, u2)`` with the correctors solved per macroscopic cell.

    The frozen state of macro cell ``c`` is ``(u0, Du0)`` at its centre, with
    outer corrector ``outer[c]`` on ``grid_Y`` and inner correctors
    ``inner[c, b]`` on ``grid_Z`` at the outer quadrature points ``b``.
    Between cell centres (in ``x``) and between quadrature points (in ``y``)
    the correctors are interpolated linearly, which amounts to linear
    interpolation of the frozen parameters.
    """

    u0: ScalarField
    grid_Y: TensorGrid
    grid_Z: TensorGrid
    states: np.ndarray  # (M, 1 + d): r, xi per macro cell
    outer: np.ndarray  # (M, ndof_Y)
    inner: np.ndarray  # (M, nq_Y_total, ndof_Z)
    residuals: np.ndarray  # (M,) outer residual norms

    @property
    def dim(self):
        return self.u0.grid.dim

    def _macro(self, x):
        g = self.u0.grid
        x = np.asarray(x, dtype=float).reshape(-1, g.dim)
        axes = []
        for k in range(g.dim):
            centres = g.lo[k] + (np.arange(g.n) + 0.5) * g.h[k]
            axes.append(_axis_weights(x[:, k], centres))
        strides = g.n ** np.arange(g.dim)
        return [(sum(i * s for i, s in zip(idx, strides)), w) for idx, w in _tensor_weights(axes)]

    def _quad(self, y):
        gy = self.grid_Y
        y = wrap_cell(np.asarray(y, dtype=float)).reshape(-1, gy.dim)
        axes = []
        for k in range(gy.dim):
            pos = gy.lo[k] + ((np.arange(gy.n)[:, None] + GAUSS_POINTS[None, :]) * gy.h[k]).ravel()
            axes.append(_axis_weights(y[:, k], pos, gy.hi[k] - gy.lo[k]))
        strides = gy.n ** np.arange(gy.dim)
        out = []
        for idx, w in _tensor_weights(axes):
            cell = sum((i // 2) * s for i, s in zip(idx, strides))
            q = sum((i % 2) * 2**k for k, i in enumerate(idx))
            out.append((cell * gy.nq + q, w))
        return out

    def _combine(self, x, y, z, grad):
        """Interpolated u1 and u2 (or their y- and z-gradients) at matching point arrays."""
        macro = self._macro(x)
        gy, gz = self.grid_Y, self.grid_Z
        flat = self.inner.reshape(-1, self.inner.shape[-1])
        per_macro = gy.ncell * gy.nq
        quad = self._quad(y)
        ev_y = gy.interpolate_grad if grad else gy.interpolate
        ev_z = gz.interpolate_grad if grad else gz.interpolate
        u1 = u2 = 0.0
        for c, wc in macro:
            wc_ = wc[:, None] if grad else wc
            u1 = u1 + wc_ * ev_y(self.outer, y, rows=c)
            for b, wb in quad:
                wb_ = wb[:, None] if grad else wb
                u2 = u2 + wc_ * wb_ * ev_z(flat, z, rows=c * per_macro + b)
        return u1, u2

    def u1(self, x, y):
        return self._combine(x, y, y, False)[0]

    def u2(self, x, y, z):
        return self._combine(x, y, z, False)[1]

    def grad_limit(self, x, y, z):
        """``Du0(x) + D_y u1(x, y) + D_z u2(x, y, z)``."""
        x = np.asarray(x, dtype=float)
        g0 = self.u0.grid.interpolate_grad(self.u0.values, x)
        g1, g2 = self._combine(x, y, z, True)
        return g0 + g1 + g2


def homog_triple(u0: ScalarField, a, grids, opts=None):
    """Solve the cell problems at the frozen state of every macroscopic cell."""
    gy, gz = _grids(grids, a.dim)
    grid = u0.grid
    centers = grid.cell_centers
    r = grid.interpolate(u0.values, centers)
    xi = grid.interpolate_grad(u0.values, centers)
    states = np.column_stack([r, xi])
    outer, inner, resid = [], [], []
    done = {}
    prev = None
    for c in range(grid.ncell):
        key = states[c].tobytes()
        if key not in done:
            sol = solve_outer_cell(a, r[c], xi[c], (gy, gz), opts, init=prev)
            prev = sol.corrector.values
            done[key] = sol
        sol = done[key]
        outer.append(sol.corrector.values)
        inner.append(sol.inner)
        resid.append(sol.residual_norm)
    return HomogTriple(u0, gy, gz, states, np.array(outer), np.array(inner), np.array(resid))


def boundary_cutoff(x, width, lo=0.0, hi=1.0):
    """``min(1, dist(x, boundary of the box) / width)``."""
    x = np.asarray(x, dtype=float)
    dist = np.min(np.minimum(x - lo, hi - x), axis=-1)
    return np.clip(dist / width, 0.0, 1.0)


def reconstruct(u0: ScalarField, a, eps, grids, opts=None, triple=None, grid=None, cutoff=True):
    """``u0 + eta (eps u1(x, x/eps) + eps^2 u2(x, x/eps, x/eps^2))`` at fine-grid nodes.

    Args:
        grids: cell grids as for :func:`solve_outer_cell`.
        triple: precomputed :class:`HomogTriple`; solved on demand otherwise.
        grid: target Dirichlet grid; default :func:`fine_grid_for` ``eps``.
        cutoff: multiply the corrector terms by :func:`boundary_cutoff` of
            width ``eps`` so that the result vanishes on the boundary without
            a one-cell gradient spike; ``False`` gives ``eta = 1``.
    """
    triple = triple or homog_triple(u0, a, grids, opts)
    grid = grid or fine_grid_for(eps, u0.grid.dim)
    _check_resolution(grid, eps)
    x = grid.dof_coords
    eta = boundary_cutoff(x, eps) if cutoff else 1.0
    corr = eps * triple.u1(x, x / eps) + eps**2 * triple.u2(x, x / eps, x / eps**2)
    return ScalarField(grid, u0(x) + eta * corr)
