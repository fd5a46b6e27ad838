"""Reiterated homogenization of monotone operators with Orlicz growth.

Modules:
    nfunction: N-functions, conjugates, growth indices and growth conditions.
    grid: Q1 tensor grids, fields, quadrature and Orlicz norms.
    flux: coefficient families and sampled hypothesis checks.
    cell: inner and outer cell problems and the effective flux table.
    solver: Newton engine, macroscopic and fine-scale solvers, correctors.
    harness: convergence studies, two-scale pairings and export.
"""

from .errors import (
    ConvergenceError,
    DomainError,
    HomogError,
    HypothesisError,
    OutOfRangeError,
    UsageError,
)
from .newton import SolveOptions, solve_monotone_system

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DomainError",
    "HomogError",
    "HypothesisError",
    "OutOfRangeError",
    "UsageError",
    "SolveOptions",
    "solve_monotone_system",
]
