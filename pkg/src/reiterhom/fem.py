"""Q1 assembly of flux residuals and their tangents on a TensorGrid.

For a pointwise flux ``F`` at quadrature points the residual is
``R_i = sum_q w_q F_q . grad N_i - sum_q w_q f_q N_i``; the tangent is
assembled from ``dF/dlambda`` and, when the flux depends on the unknown
itself, ``dF/dzeta``. All kernels accept leading batch axes and return
block-diagonal matrices for batched input.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp


@lru_cache(maxsize=32)
def _kernels(grid):
    """Reference products flattened so that element loops become matmuls."""
    nq, nloc, d = grid.nq, grid.nloc, grid.dim
    wdn = grid.basis_grad * grid.quad_weights[:, None, None]
    wn = grid.basis * grid.quad_weights[:, None]
    return {
        "flux": wdn.transpose(0, 2, 1).reshape(nq * d, nloc),
        "load": wn,
        "stiff": np.einsum("qak,qbl->qklab", wdn, grid.basis_grad).reshape(nq * d * d, nloc * nloc),
        "mixed": np.einsum("qak,qb->qkab", wdn, grid.basis).reshape(nq * d, nloc * nloc),
    }


def residual(grid, flux, source=None):
    """``flux``: (..., ncell, nq, d); ``source``: (..., ncell, nq) or None."""
    ker = _kernels(grid)
    flux = np.asarray(flux, dtype=float)
    local = flux.reshape(flux.shape[:-2] + (-1,)) @ ker["flux"]
    if source is not None:
        local = local - np.asarray(source, dtype=float) @ ker["load"]
    return grid.scatter(local)


def load_vector(grid, source):
    return grid.scatter(np.asarray(source, dtype=float) @ _kernels(grid)["load"])


@lru_cache(maxsize=32)
def _pattern(grid):
    gi = grid.cell_dofs
    rows = np.broadcast_to(gi[:, :, None], gi.shape + (gi.shape[1],))
    cols = np.broadcast_to(gi[:, None, :], gi.shape + (gi.shape[1],))
    mask = (rows >= 0) & (cols >= 0)
    return rows[mask], cols[mask], mask


def tangent(grid, dflux, dflux_dzeta=None):
    """Block-diagonal sparse tangent; ``dflux``: (..., ncell, nq, d, d)."""
    ker = _kernels(grid)
    dflux = np.asarray(dflux, dtype=float)
    kloc = dflux.reshape(dflux.shape[:-3] + (-1,)) @ ker["stiff"]
    if dflux_dzeta is not None:
        dz = np.asarray(dflux_dzeta, dtype=float)
        kloc = kloc + dz.reshape(dz.shape[:-2] + (-1,)) @ ker["mixed"]
    rows, cols, mask = _pattern(grid)
    kloc = kloc.reshape(kloc.shape[:-1] + (grid.nloc, grid.nloc))
    lead = kloc.shape[:-3]
    b = int(np.prod(lead)) if lead else 1
    data = kloc.reshape((b,) + mask.shape)[:, mask]  # mask drops Dirichlet rows/cols
    off = (np.arange(b) * grid.ndof)[:, None]
    n = b * grid.ndof
    mat = sp.coo_matrix(
        (data.ravel(), ((rows[None, :] + off).ravel(), (cols[None, :] + off).ravel())), shape=(n, n)
    )
    return mat.tocsr()


def stiffness(grid, coef=None):
    """Scalar-coefficient Laplacian ``int coef grad u . grad v`` (coef per quadrature point)."""
    d = grid.dim
    c = np.ones((grid.ncell, grid.nq)) if coef is None else np.asarray(coef, dtype=float)
    eye = np.eye(d)
    return tangent(grid, c[..., None, None] * eye)
