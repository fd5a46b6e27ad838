"""Damped Newton engine for discrete monotone systems.

The engine works on possibly *blocked* systems: ``blocks`` independent
subsystems of equal size stacked in one vector (the cell solvers use this to
solve many frozen-parameter problems at once). The line search is Armijo
backtracking on each block's Euclidean residual norm, so a hard block does
not throttle the easy ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, OutOfRangeError, UsageError

log = logging.getLogger(__name__)

DIRECT = "direct"
CG = "cg"
GMRES = "gmres"


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 60
    armijo_c: float = 1e-4
    max_halvings: int = 30
    jacobian: str = "analytic"  # or "fd"
    linear_solver: str = DIRECT

    def __post_init__(self):
        if not self.tol > 0:
            raise UsageError("tol must be positive")
        if self.max_iter < 1:
            raise UsageError("max_iter must be >= 1")
        if self.jacobian not in ("analytic", "fd"):
            raise UsageError(f"unknown jacobian mode {self.jacobian!r}")
        if self.linear_solver not in (DIRECT, CG, GMRES):
            raise UsageError(f"unknown linear solver {self.linear_solver!r}")

    def with_(self, **kw):
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return SolveOptions(**vals)

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg or {})
        known = {k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg}
        return cls(**known)


@dataclass
class NewtonResult:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    history: list = field(default_factory=list)
    block_norms: np.ndarray = None


def fd_jacobian(residual, x, r0, rel_step=1e-7):
    """Dense forward-difference Jacobian returned in CSR form."""
    n = x.size
    cols = []
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += h
        cols.append((residual(xp) - r0) / h)
    return sp.csr_matrix(np.column_stack(cols) if cols else np.zeros((0, 0)))


def _solve_linear(mat, rhs, kind):
    if kind == DIRECT:
        lu = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        return lu.solve(rhs)
    try:
        ilu = spla.spilu(mat.tocsc(), drop_tol=1e-6)
        prec = spla.LinearOperator(mat.shape, ilu.solve)
    except RuntimeError:
        prec = None
    solver = spla.cg if kind == CG else spla.gmres
    out, info = solver(mat, rhs, M=prec, rtol=1e-13, atol=0.0, maxiter=10 * rhs.size)
    if info != 0:
        out, info = spla.gmres(mat, rhs, M=prec, rtol=1e-13, atol=0.0, maxiter=10 * rhs.size)
    if info != 0:
        raise RuntimeError("iterative linear solve did not converge")
    return out


def linear_step(mat, rhs, pinned=None, kind=DIRECT):
    """Solve ``mat dx = rhs`` with ``dx[pinned] = 0``.

    A singular matrix is retried once with a 1e-12 relative diagonal shift.
    """
    n = rhs.size
    if pinned is not None and len(pinned):
        keep = np.ones(n, dtype=bool)
        keep[pinned] = False
        sub = mat[keep][:, keep]
        rhs_k = rhs[keep]
    else:
        keep = None
        sub, rhs_k = mat, rhs
    dx_k = None
    for shift in (0.0, 1e-12):
        a = sub
        if shift:
            diag = np.abs(sub.diagonal())
            scale = float(diag.max()) if diag.size and diag.max() > 0 else 1.0
            a = sub + shift * scale * sp.identity(sub.shape[0], format="csr")
        try:
            with np.errstate(all="ignore"):
                dx_k = _solve_linear(a, rhs_k, kind)
        except RuntimeError:
            dx_k = None
        if dx_k is not None and np.all(np.isfinite(dx_k)):
            break
        dx_k = None
    if dx_k is None:
        raise ConvergenceError("singular linearization")
    if keep is None:
        return dx_k
    dx = np.zeros(n)
    dx[keep] = dx_k
    return dx


def solve_monotone_system(residual, init, opts=None, jac=None, *, blocks=1, pinned=None, project=None,
                          step=None):
    """Find ``x`` with ``||residual(x)|| <= opts.tol`` by damped Newton.

    Args:
        residual: map from a dof vector to the residual vector.
        init: initial guess.
        opts: :class:`SolveOptions`.
        jac: optional map ``x -> sparse Jacobian``; forward differences otherwise.
        blocks: number of independent equal-size subsystems in ``x``.
        pinned: dof indices whose update is held at zero (kernel removal).
        project: optional map applied to every Newton update.
        step: optional map ``(x, r) -> dx`` replacing the Jacobian solve, for
            callers that manage their own factorizations.

    Raises:
        ConvergenceError: singular linearization that a diagonal shift cannot
            fix, failed line search, or ``max_iter`` exhausted.
    """
    opts = opts or SolveOptions()
    x = np.array(init, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise UsageError("initial guess must be finite")
    if x.size % blocks:
        raise UsageError("dof count is not divisible by the block count")
    m = x.size // blocks

    def bnorms(r):
        return np.linalg.norm(r.reshape(blocks, m), axis=1)

    r = np.asarray(residual(x), dtype=float)
    norms = bnorms(r)
    history = [float(norms.max())]
    for it in range(opts.max_iter + 1):
        if norms.max() <= opts.tol:
            return NewtonResult(x, float(norms.max()), it, history, norms)
        if it == opts.max_iter:
            break
        try:
            if step is not None:
                dx = step(x, r)
            else:
                mat = fd_jacobian(residual, x, r) if jac is None else jac(x)
                dx = linear_step(mat, -r, pinned, opts.linear_solver)
        except ConvergenceError as exc:
            raise ConvergenceError(str(exc), float(norms.max()), history) from None
        if project is not None:
            dx = project(dx)
        done = norms <= opts.tol
        alpha = np.where(done, 0.0, 1.0)
        accepted = done.copy()
        for _ in range(opts.max_halvings + 1):
            trial = x + np.repeat(alpha, m) * dx
            try:
                rt = np.asarray(residual(trial), dtype=float)
                nt = bnorms(rt)
                ok = np.isfinite(nt) & ((nt <= (1 - opts.armijo_c * alpha) * norms) | (nt <= opts.tol))
            except (OutOfRangeError, FloatingPointError):
                rt, nt, ok = None, None, np.zeros(blocks, dtype=bool)
            accepted |= ok
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        if not accepted.all() or rt is None:
            raise ConvergenceError(
                f"line search failed at iteration {it} (residual {norms.max():.3e})",
                float(norms.max()),
                history,
            )
        x, r, norms = trial, rt, nt
        history.append(float(norms.max()))
        log.debug("newton it=%d residual=%.3e", it + 1, history[-1])
    raise ConvergenceError(
        f"no convergence in {opts.max_iter} iterations (residual {norms.max():.3e})",
        float(norms.max()),
        history,
    )
