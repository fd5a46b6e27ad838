"""N-functions: evaluation, density, complementary function, inverse and growth tests.

An N-function is a convex ``Phi(t) = int_0^t phi(s) ds`` with ``phi``
nondecreasing, ``phi(0) = 0`` and ``phi(t) -> inf``. Four families are built
in, all vectorized over numpy arrays:

* ``power``        ``coef * t**p`` (``coef = 1`` by default)
* ``scaled_power`` ``t**p / p``
* ``power_log``    ``t**p * log(1 + t)``
* ``tabulated``    density sampled on a grid, monotone cubic (PCHIP) interpolation

The complementary function ``sup_t (s t - Phi(t))`` is available in closed form
for the power families and through a bisection-based Legendre transform for
everything else.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DomainError, OutOfRangeError, UsageError

BISECT_TOL = 1e-12
BISECT_MAXITER = 200
DEFAULT_GRID = (1e-6, 1e6, 4096)


def log_grid(lo=DEFAULT_GRID[0], hi=DEFAULT_GRID[1], n=DEFAULT_GRID[2]):
    return np.geomspace(lo, hi, n)


def _as_nonneg(t, what="t"):
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} must be finite")
    if np.any(arr < 0):
        raise DomainError(f"{what} must be nonnegative")
    return arr


def _scalar_or_array(x, like):
    return float(x) if np.ndim(like) == 0 else x


def bisect_increasing(fn, target, lo=None, hi=None, tol=BISECT_TOL, maxiter=BISECT_MAXITER, hi_limit=None):
    """Vectorized bisection for ``fn(t) = target`` with ``fn`` nondecreasing on ``t >= 0``.

    ``hi`` is expanded geometrically until ``fn(hi) >= target``. When
    ``hi_limit`` is given and the bracket cannot be closed below it an
    :class:`OutOfRangeError` is raised.
    """
    target = np.asarray(target, dtype=float)
    lo = np.zeros_like(target) if lo is None else np.broadcast_to(np.asarray(lo, float), target.shape).copy()
    hi = np.maximum(np.ones_like(target), 2.0 * lo) if hi is None else np.broadcast_to(np.asarray(hi, float), target.shape).copy()
    for _ in range(2000):
        short = fn(hi) < target
        if not np.any(short):
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, hi * 2.0, hi)
        if hi_limit is not None and np.any(hi > hi_limit):
            capped = np.minimum(hi, hi_limit)
            if np.any(fn(capped)[short] < target[short]):
                raise OutOfRangeError("bisection bracket exceeds the tabulated range")
            hi = np.where(short, capped, hi)
        if not np.all(np.isfinite(hi)):
            raise OutOfRangeError("bisection bracket expansion overflowed")
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        active = (hi - lo > tol) & (mid > lo) & (mid < hi)
        if not np.any(active):
            break
        below = fn(mid) < target
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    return 0.5 * (lo + hi)


class NFunction:
    """Base class; subclasses provide ``_value``, ``_density`` and optionally ``_second``."""

    family = "abstract"
    t_max = math.inf

    def value(self, t):
        t = _as_nonneg(t)
        self._check_range(t)
        return _scalar_or_array(self._value(t), t)

    def density(self, t):
        t = _as_nonneg(t)
        self._check_range(t)
        return _scalar_or_array(self._density(t), t)

    def second_derivative(self, t):
        t = _as_nonneg(t)
        self._check_range(t)
        return _scalar_or_array(self._second(t), t)

    @property
    def has_second_derivative(self):
        return True

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise DomainError("v must be finite")
        if np.any(v < 0):
            raise DomainError("v must be nonnegative")
        out = bisect_increasing(self._value, v, hi_limit=self.t_max if math.isfinite(self.t_max) else None)
        out = np.where(v == 0, 0.0, out)
        return _scalar_or_array(out, v)

    def _check_range(self, t):
        if math.isfinite(self.t_max) and np.any(t > self.t_max * (1 + 1e-14)):
            raise OutOfRangeError(f"t beyond the tabulated range [0, {self.t_max}]")

    def __call__(self, t):
        return self.value(t)

    def _second(self, t):
        raise NotImplementedError


@dataclass(frozen=True)
class PowerNF(NFunction):
    """``coef * t**p`` with ``p > 1``."""

    p: float
    coef: float = 1.0

    def __post_init__(self):
        if not self.p > 1:
            raise UsageError("power N-functions need p > 1")
        if not self.coef > 0:
            raise UsageError("power coefficient must be positive")

    @property
    def family(self):
        if self.coef == 1.0:
            return "power"
        if self.coef == 1.0 / self.p:
            return "scaled_power"
        return "power"

    def _value(self, t):
        return self.coef * t**self.p

    def _density(self, t):
        return self.coef * self.p * t ** (self.p - 1)

    def _second(self, t):
        with np.errstate(divide="ignore"):
            return self.coef * self.p * (self.p - 1) * np.power(t, self.p - 2)

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("v must be finite and nonnegative")
        return _scalar_or_array((v / self.coef) ** (1.0 / self.p), v)

    def to_config(self):
        if self.family == "scaled_power":
            return {"family": "scaled_power", "p": self.p}
        cfg = {"family": "power", "p": self.p}
        if self.coef != 1.0:
            cfg["coef"] = self.coef
        return cfg


@dataclass(frozen=True)
class PowerLogNF(NFunction):
    """``t**p * log(1 + t)``."""

    p: float
    family = "power_log"

    def __post_init__(self):
        if not self.p >= 1:
            raise UsageError("power_log needs p >= 1")

    def _value(self, t):
        return t**self.p * np.log1p(t)

    def _density(self, t):
        p = self.p
        return p * t ** (p - 1) * np.log1p(t) + t**p / (1 + t)

    def _second(self, t):
        p = self.p
        with np.errstate(divide="ignore", invalid="ignore"):
            first = np.where(t > 0, p * (p - 1) * np.power(t, p - 2) * np.log1p(t), 0.0)
            if p < 2:
                # t**(p-2) log(1+t) ~ t**(p-1) near 0
                first = np.where(t > 0, first, 0.0)
        return first + 2 * p * t ** (p - 1) / (1 + t) - t**p / (1 + t) ** 2

    def to_config(self):
        return {"family": "power_log", "p": self.p}


@dataclass(frozen=True, eq=False)
class TabulatedNF(NFunction):
    """Density sampled at strictly increasing abscissae, PCHIP-interpolated."""

    t: np.ndarray
    phi: np.ndarray
    _interp: PchipInterpolator = field(init=False, repr=False)
    _anti: object = field(init=False, repr=False)
    _deriv: object = field(init=False, repr=False)
    family = "tabulated"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        phi = np.asarray(self.phi, dtype=float).ravel()
        if t.size != phi.size or t.size < 2:
            raise UsageError("tabulated density needs matching t and phi arrays")
        if np.any(np.diff(t) <= 0):
            raise UsageError("tabulated abscissae must be strictly increasing")
        if t[0] < 0 or np.any(phi < 0) or np.any(np.diff(phi) < 0):
            raise UsageError("tabulated density must be nonnegative and nondecreasing")
        if t[0] > 0:
            t = np.concatenate([[0.0], t])
            phi = np.concatenate([[0.0], phi])
        if phi[0] != 0:
            raise UsageError("tabulated density must vanish at t = 0")
        interp = PchipInterpolator(t, phi, extrapolate=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "_interp", interp)
        object.__setattr__(self, "_anti", interp.antiderivative())
        object.__setattr__(self, "_deriv", interp.derivative())

    @property
    def t_max(self):
        return float(self.t[-1])

    def _value(self, t):
        return np.asarray(self._anti(np.minimum(t, self.t_max)), dtype=float)

    def _density(self, t):
        return np.asarray(self._interp(np.minimum(t, self.t_max)), dtype=float)

    def _second(self, t):
        return np.asarray(self._deriv(np.minimum(t, self.t_max)), dtype=float)

    def to_config(self):
        return {"family": "tabulated", "t": self.t.tolist(), "phi": self.phi.tolist()}


@dataclass(frozen=True, eq=False)
class LegendreNF(NFunction):
    """Complementary function of ``primal`` computed by bisection on its density."""

    primal: NFunction
    family = "legendre"

    @property
    def t_max(self):
        if math.isfinite(self.primal.t_max):
            return float(self.primal._density(np.asarray(self.primal.t_max)))
        return math.inf

    def _argmax(self, s):
        # phi(t*) = s, the maximizer of s t - Phi(t)
        limit = self.primal.t_max if math.isfinite(self.primal.t_max) else None
        return bisect_increasing(self.primal._density, s, hi_limit=limit)

    def _value(self, s):
        ts = self._argmax(s)
        return np.maximum(s * ts - self.primal._value(ts), 0.0)

    def _density(self, s):
        return self._argmax(s)

    def _second(self, s):
        with np.errstate(divide="ignore"):
            return 1.0 / self.primal._second(self._argmax(s))

    def to_config(self):
        return {"family": "legendre", "primal": self.primal.to_config()}


def power(p, coef=1.0):
    return PowerNF(float(p), float(coef))


def scaled_power(p):
    return PowerNF(float(p), 1.0 / float(p))


def power_log(p):
    return PowerLogNF(float(p))


def tabulated(t, phi):
    return TabulatedNF(np.asarray(t, float), np.asarray(phi, float))


def tabulate_density(density, t_max, n=DEFAULT_GRID[2], t_min=DEFAULT_GRID[0]):
    """Sample a density callable on a log-spaced abscissa ``[t_min, t_max]``."""
    t = np.geomspace(t_min, t_max, n)
    return tabulated(t, density(t))


def exp_family(t_max=100.0, n=DEFAULT_GRID[2]):
    """``exp(t) - t - 1`` as a tabulated N-function (not of class Delta2)."""
    return tabulate_density(np.expm1, t_max, n)


def load_tabulated_csv(path):
    """Read a two-column ``t, phi(t)`` CSV (an optional header row is skipped)."""
    ts, phis = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                t, ph = float(row[0]), float(row[1])
            except ValueError:
                if ts:
                    raise UsageError(f"bad row in {path}: {row}") from None
                continue
            ts.append(t)
            phis.append(ph)
    return tabulated(ts, phis)


def from_config(cfg):
    """Build an N-function from ``{"family": ..., "p": ...}`` style dictionaries."""
    if isinstance(cfg, NFunction):
        return cfg
    fam = cfg.get("family")
    if fam == "power":
        return power(cfg["p"], cfg.get("coef", 1.0))
    if fam == "scaled_power":
        return scaled_power(cfg["p"])
    if fam == "power_log":
        return power_log(cfg["p"])
    if fam == "tabulated":
        if "csv" in cfg:
            return load_tabulated_csv(cfg["csv"])
        return tabulated(cfg["t"], cfg["phi"])
    if fam == "exp":
        return exp_family(cfg.get("t_max", 100.0))
    if fam == "legendre":
        return LegendreNF(from_config(cfg["primal"]))
    raise UsageError(f"unknown N-function family {fam!r}")


# --- operations -----------------------------------------------------------


def nf_eval(nf, t):
    return nf.value(t)


def nf_density(nf, t):
    return nf.density(t)


def nf_inverse(nf, v):
    return nf.inverse(v)


@dataclass(frozen=True)
class ConjugatePair:
    primal: NFunction
    dual: NFunction
    construction: str  # "closed_form" or "numerical_legendre"

    def young_gap(self, s, t):
        """``Phi(t) + Phi~(s) - s t``; nonnegative by Young's inequality."""
        return self.primal.value(t) + self.dual.value(s) - np.asarray(s) * np.asarray(t)


def nf_conjugate(nf, method="auto"):
    """Complementary N-function. ``method`` is ``auto``, ``closed`` or ``numerical``."""
    if method not in ("auto", "closed", "numerical"):
        raise UsageError(f"unknown conjugation method {method!r}")
    if method != "numerical" and isinstance(nf, PowerNF):
        p, c = nf.p, nf.coef
        q = p / (p - 1)
        dual = PowerNF(q, (1 - 1 / p) * (c * p) ** (-1 / (p - 1)))
        if c == 1 / p:
            dual = scaled_power(q)
        return ConjugatePair(nf, dual, "closed_form")
    if method != "numerical" and isinstance(nf, LegendreNF):
        return ConjugatePair(nf, nf.primal, "closed_form")
    if method == "closed":
        raise UsageError(f"no closed-form conjugate for family {nf.family!r}")
    return ConjugatePair(nf, LegendreNF(nf), "numerical_legendre")


def conjugate_inverse_of(nf):
    """The map ``s -> Phi~^{-1}(Phi(s))`` appearing in the growth and coercivity bounds."""
    dual = nf_conjugate(nf).dual

    def g(s):
        return dual.inverse(nf.value(s))

    return g


@dataclass(frozen=True)
class GrowthIndices:
    lower: float
    upper: float
    grid: np.ndarray = field(repr=False, compare=False)


def simonenko_indices(nf, t_grid=None):
    """Infimum and supremum of ``t phi(t) / Phi(t)`` over ``t_grid``."""
    t = log_grid() if t_grid is None else np.asarray(t_grid, dtype=float).ravel()
    if t.size == 0:
        raise UsageError("empty grid")
    if np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise DomainError("grid entries must be positive and finite")
    ratio = t * nf.density(t) / nf.value(t)
    return GrowthIndices(float(np.min(ratio)), float(np.max(ratio)), t)


@dataclass(frozen=True)
class Delta2Report:
    passes: bool
    alpha: float
    alpha_previous_decade: float


def check_delta2(nf, t0=1.0, t_grid=None):
    """Sampled test of ``Phi(2t) <= alpha Phi(t)`` for ``t >= t0``.

    ``alpha`` is the supremum of ``Phi(2t)/Phi(t)`` on the grid. The function is
    declared not-Delta2 when that running supremum grows by more than 10%
    across the final decade of the grid, or is not finite.
    """
    if not t0 > 0:
        raise DomainError("t0 must be positive")
    if t_grid is None:
        hi = DEFAULT_GRID[1]
        if math.isfinite(nf.t_max):
            hi = nf.t_max / 2
        t = np.geomspace(t0, hi, DEFAULT_GRID[2])
    else:
        t = np.asarray(t_grid, dtype=float).ravel()
    if t.size == 0:
        raise UsageError("empty grid")
    if np.any(t < t0):
        raise DomainError("grid entries must be >= t0")
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = nf.value(2 * t) / nf.value(t)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    alpha = float(np.max(ratio))
    early = t <= t.max() / 10
    prev = float(np.max(ratio[early])) if np.any(early) else float(ratio[0])
    passes = math.isfinite(alpha) and alpha <= 1.1 * prev
    return Delta2Report(passes, alpha, prev)


@dataclass(frozen=True)
class DominationReport:
    dominates: bool
    k: float


def check_domination(c, b, k_grid, t_grid):
    """Is ``C(t) <= B(k t)`` on ``t_grid`` for some ``k`` in ``k_grid``? Returns the smallest such k."""
    ks = np.sort(np.asarray(k_grid, dtype=float).ravel())
    t = np.asarray(t_grid, dtype=float).ravel()
    if ks.size == 0 or t.size == 0:
        raise UsageError("empty grid")
    ct = c.value(t)
    for k in ks:
        if np.all(ct <= b.value(k * t) * (1 + 1e-12)):
            return DominationReport(True, float(k))
    return DominationReport(False, math.nan)


@dataclass(frozen=True)
class DeltaPrimeReport:
    passes: bool
    constant: float


def check_delta_prime(nf, t_grid=None):
    """Sampled test of ``B(ts) <= C B(t) B(s)``, with the same final-decade rule as Delta2."""
    t = np.geomspace(1e-3, 1e3, 200) if t_grid is None else np.asarray(t_grid, dtype=float).ravel()
    if t.size == 0:
        raise UsageError("empty grid")
    bt = nf.value(t)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ratio = nf.value(np.outer(t, t)) / np.outer(bt, bt)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    const = float(np.max(ratio))
    early = t <= t.max() / 10
    prev = float(np.max(ratio[np.ix_(early, early)])) if np.any(early) else float(ratio[0, 0])
    return DeltaPrimeReport(math.isfinite(const) and const <= 1.1 * prev, const)
