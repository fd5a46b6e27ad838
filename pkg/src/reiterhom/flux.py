"""Flux coefficients ``a(y, z, zeta, lambda)``, built-in families, and a sampling
verifier for the structural hypotheses H1-H6.

All callables broadcast: ``y`` and ``z`` are ``(..., d)`` arrays, ``zeta`` is
``(...)`` and ``lam`` is ``(..., d)``; the flux returns ``(..., d)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nfunction as nfm
from .errors import UsageError
from .expr import PointMap, scalar_function

TINY = 1e-12


@dataclass(frozen=True)
class DegenerateWeight:
    """Continuous nonincreasing ``h: [0, inf) -> (0, 1)`` bounded below by ``h_min``."""

    h: Callable
    h_min: float
    source: str = ""

    def __post_init__(self):
        if not self.h_min > 0:
            raise UsageError("h_min must be positive")

    def __call__(self, t):
        return np.asarray(self.h(np.asarray(t, dtype=float)), dtype=float)

    def check(self, t_grid=None):
        """Return the list of violated invariants on a test grid (empty when valid)."""
        t = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 512)]) if t_grid is None else np.asarray(t_grid)
        v = self(t)
        problems = []
        if not v[0] < 1:
            problems.append("h(0) >= 1")
        if np.any(np.diff(v) > 1e-14):
            problems.append("h is not nonincreasing")
        if np.any(v < self.h_min):
            problems.append("h falls below h_min")
        if np.any(v <= 0) or np.any(v >= 1):
            problems.append("h leaves (0, 1)")
        return problems

    @classmethod
    def constant(cls, h0):
        h0 = float(h0)
        return cls(lambda t: np.full(np.shape(t), h0), h0, repr(h0))

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, (int, float)):
            return cls.constant(cfg)
        fn = scalar_function(cfg["h"], "t")
        return cls(fn, float(cfg["h_min"]), cfg["h"])


def _coef_map(c, prefix, dim):
    if isinstance(c, PointMap):
        return c
    if isinstance(c, (int, float)):
        return PointMap(repr(float(c)), prefix, dim)
    if isinstance(c, str):
        return PointMap(c, prefix, dim)
    if callable(c):
        return c
    raise UsageError(f"cannot interpret coefficient {c!r}")


def _check_positive(c, dim, what):
    m = 64 if dim == 1 else 32
    axis = (np.arange(m) + 0.5) / m - 0.5
    pts = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    vals = np.asarray(c(pts), dtype=float)
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise UsageError(f"{what} must be positive on the unit cell")
    return float(vals.min()), float(vals.max())


@dataclass(frozen=True, eq=False)
class FluxCoefficient:
    """The coefficient map with optional analytic derivatives and metadata.

    ``interfaces`` maps ``"y"``/``"z"`` to ``{axis: set(positions)}`` of declared
    jump locations (piecewise-constant coefficients), excluded from
    continuity sampling.
    """

    eval: Callable
    dim: int
    d_lambda: Optional[Callable] = None
    d_zeta: Optional[Callable] = None
    periodic: bool = True
    nf_pair: Optional[tuple] = None
    weight: Optional[DegenerateWeight] = None
    interfaces: dict = field(default_factory=dict)
    depends_on_y: bool = True
    depends_on_z: bool = True
    depends_on_zeta: bool = True
    zero_at_zero: bool = False
    name: str = "custom"
    config: Optional[dict] = None

    def __call__(self, y, z, zeta, lam):
        return np.asarray(self.eval(y, z, zeta, lam), dtype=float)

    def jacobian(self, y, z, zeta, lam, mode="analytic"):
        """``d a / d lambda`` with shape ``(..., d, d)``."""
        if self.d_lambda is not None and mode == "analytic":
            return np.asarray(self.d_lambda(y, z, zeta, lam), dtype=float)
        lam = np.asarray(lam, dtype=float)
        cols = []
        for k in range(lam.shape[-1]):
            h = 1e-6 * np.maximum(1.0, np.abs(lam[..., k]))
            e = np.zeros(lam.shape[-1])
            e[k] = 1.0
            hp = h[..., None] * e
            cols.append((self(y, z, zeta, lam + hp) - self(y, z, zeta, lam - hp)) / (2 * h[..., None]))
        return np.stack(cols, axis=-1)

    def zeta_derivative(self, y, z, zeta, lam, mode="analytic"):
        """``d a / d zeta`` with shape ``(..., d)``; zero for zeta-free fluxes."""
        if not self.depends_on_zeta:
            shape = np.broadcast_shapes(np.shape(zeta), np.shape(lam)[:-1])
            return np.zeros(shape + (np.shape(lam)[-1],))
        if self.d_zeta is not None and mode == "analytic":
            return np.asarray(self.d_zeta(y, z, zeta, lam), dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        h = 1e-6 * np.maximum(1.0, np.abs(zeta))
        return (self(y, z, zeta + h, lam) - self(y, z, zeta - h, lam)) / (2 * h[..., None])

    @property
    def phi(self):
        return self.nf_pair[0] if self.nf_pair else None


def _unit_dir(lam):
    t = np.linalg.norm(lam, axis=-1)
    ts = np.maximum(t, TINY)
    return t, ts, lam / ts[..., None]


def _phi_lap(nf):
    """``lambda -> phi(|lambda|) lambda/|lambda|`` and its Jacobian."""

    def second(t):
        try:
            return np.asarray(nf._second(t), dtype=float)
        except NotImplementedError:
            h = 1e-6 * np.maximum(t, 1e-6)
            return (nf._density(t + h) - nf._density(np.maximum(t - h, 0))) / (t + h - np.maximum(t - h, 0))

    def val(lam):
        t, ts, e = _unit_dir(lam)
        nf._check_range(t)
        return nf._density(t)[..., None] * e

    def jac(lam):
        t, ts, e = _unit_dir(lam)
        nf._check_range(ts)
        ratio = nf._density(ts) / ts
        dphi = second(ts)
        d = lam.shape[-1]
        eye = np.eye(d)
        outer = e[..., :, None] * e[..., None, :]
        return ratio[..., None, None] * eye + (dphi - ratio)[..., None, None] * outer

    return val, jac


def make_linear_separable(c_y, c_z, dim=1, weight=None):
    """``a = c_y(y) c_z(z) lambda`` with Phi = Psi = t^2/2."""
    cy, cz = _coef_map(c_y, "y", dim), _coef_map(c_z, "z", dim)
    _check_positive(cy, dim, "c_y")
    _check_positive(cz, dim, "c_z")

    def ev(y, z, zeta, lam):
        lam = np.asarray(lam, dtype=float)
        return (cy(y) * cz(z))[..., None] * lam

    def dl(y, z, zeta, lam):
        c = cy(y) * cz(z)
        shape = np.broadcast_shapes(np.shape(c), np.shape(lam)[:-1])
        return np.broadcast_to(c, shape)[..., None, None] * np.eye(dim)

    nf = nfm.scaled_power(2)
    return FluxCoefficient(
        ev, dim, dl, None, True, (nf, nf),
        weight or DegenerateWeight.constant(0.5),
        _interfaces(cy, cz),
        depends_on_y=not _is_const(cy), depends_on_z=not _is_const(cz), depends_on_zeta=False,
        zero_at_zero=True, name="linear_separable",
        config={"family": "linear_separable", "c_y": _src(cy), "c_z": _src(cz)},
    )


def _default_psi(nf):
    # Psi must satisfy sup index(Psi) <= inf index(Phi); a power at the lower index does
    if isinstance(nf, nfm.PowerNF):
        return nf
    return nfm.scaled_power(nfm.simonenko_indices(nf, _index_grid(nf)).lower)


def make_phi_laplacian(nf, c_y=1.0, c_z=1.0, dim=1, weight=None, psi=None):
    """``a = c_y(y) c_z(z) phi(|lambda|) lambda/|lambda|``."""
    nf = nfm.from_config(nf)
    psi = _default_psi(nf) if psi is None else nfm.from_config(psi)
    cy, cz = _coef_map(c_y, "y", dim), _coef_map(c_z, "z", dim)
    _check_positive(cy, dim, "c_y")
    _check_positive(cz, dim, "c_z")
    val, jac = _phi_lap(nf)

    def ev(y, z, zeta, lam):
        lam = np.asarray(lam, dtype=float)
        return (cy(y) * cz(z))[..., None] * val(lam)

    def dl(y, z, zeta, lam):
        lam = np.asarray(lam, dtype=float)
        return (cy(y) * cz(z))[..., None, None] * jac(lam)

    return FluxCoefficient(
        ev, dim, dl, None, True, (nf, psi),
        weight or DegenerateWeight.constant(0.5),
        _interfaces(cy, cz),
        depends_on_y=not _is_const(cy), depends_on_z=not _is_const(cz), depends_on_zeta=False,
        zero_at_zero=True, name="phi_laplacian",
        config={"family": "phi_laplacian", "nf": _nf_cfg(nf), "c_y": _src(cy), "c_z": _src(cz)},
    )


def make_degenerate(nf, c_y, c_z, w: DegenerateWeight, dim=1, psi=None):
    """``a = c_y c_z g(h(|zeta|)) phi(|lambda|) lambda/|lambda|`` with ``g = Phi~^{-1} o Phi``."""
    nf = nfm.from_config(nf)
    psi = _default_psi(nf) if psi is None else nfm.from_config(psi)
    problems = w.check()
    if problems:
        raise UsageError("invalid degenerate weight: " + ", ".join(problems))
    cy, cz = _coef_map(c_y, "y", dim), _coef_map(c_z, "z", dim)
    _check_positive(cy, dim, "c_y")
    _check_positive(cz, dim, "c_z")
    val, jac = _phi_lap(nf)
    g = nfm.conjugate_inverse_of(nf)

    def factor(zeta):
        return g(w(np.abs(np.asarray(zeta, dtype=float))))

    def ev(y, z, zeta, lam):
        lam = np.asarray(lam, dtype=float)
        return (cy(y) * cz(z) * factor(zeta))[..., None] * val(lam)

    def dl(y, z, zeta, lam):
        lam = np.asarray(lam, dtype=float)
        return (cy(y) * cz(z) * factor(zeta))[..., None, None] * jac(lam)

    def dz(y, z, zeta, lam):
        zeta = np.asarray(zeta, dtype=float)
        hstep = 1e-6 * np.maximum(1.0, np.abs(zeta))
        df = (factor(zeta + hstep) - factor(zeta - hstep)) / (2 * hstep)
        return (cy(y) * cz(z) * df)[..., None] * val(np.asarray(lam, dtype=float))

    return FluxCoefficient(
        ev, dim, dl, dz, True, (nf, psi), w, _interfaces(cy, cz),
        depends_on_y=not _is_const(cy), depends_on_z=not _is_const(cz), depends_on_zeta=True,
        zero_at_zero=True, name="degenerate",
        config={"family": "degenerate", "nf": _nf_cfg(nf), "c_y": _src(cy), "c_z": _src(cz),
                "weight": {"h": w.source, "h_min": w.h_min}},
    )


def make_custom(fn, dim=1, nf_pair=None, **kw):
    """Wrap an arbitrary broadcasting callable; derivatives fall back to finite differences."""
    return FluxCoefficient(fn, dim, nf_pair=nf_pair, **kw)


def _is_const(c):
    return isinstance(c, PointMap) and c.expr.is_constant


def _src(c):
    return c.source if isinstance(c, PointMap) else getattr(c, "__name__", "callable")


def _nf_cfg(nf):
    try:
        return nf.to_config()
    except AttributeError:
        return {"family": nf.family}


def _interfaces(cy, cz):
    out = {}
    for key, c in (("y", cy), ("z", cz)):
        ifs = getattr(c, "interfaces", None)
        if ifs:
            out[key] = {int(a): sorted(v) for a, v in ifs.items()}
    return out


def flux_from_config(cfg, dim=1):
    """Build a flux from ``{"family": ..., "c_y": ..., "c_z": ..., "nf": ...}``."""
    if isinstance(cfg, FluxCoefficient):
        return cfg
    fam = cfg.get("family")
    cy, cz = cfg.get("c_y", 1.0), cfg.get("c_z", 1.0)
    weight = DegenerateWeight.from_config(cfg["weight"]) if "weight" in cfg else None
    if fam == "identity":
        return make_linear_separable(1.0, 1.0, dim)
    if fam == "linear_separable":
        return make_linear_separable(cy, cz, dim, weight)
    if fam == "phi_laplacian":
        return make_phi_laplacian(nfm.from_config(cfg["nf"]), cy, cz, dim, weight)
    if fam == "degenerate":
        if weight is None:
            raise UsageError("degenerate flux needs a weight")
        return make_degenerate(nfm.from_config(cfg["nf"]), cy, cz, weight, dim)
    raise UsageError(f"unknown flux family {fam!r}")


# --- hypothesis verification -------------------------------------------------


@dataclass(frozen=True)
class Sampler:
    n_points: int = 200
    seed: int = 0
    lam_box: float = 2.0
    zeta_box: float = 2.0
    workers: int = 1


@dataclass
class HypothesisEntry:
    name: str
    passed: bool
    worst_margin: float
    witness: dict
    details: dict = field(default_factory=dict)


@dataclass
class HypothesisReport:
    entries: dict
    theta: float
    constants: dict

    @property
    def passed(self):
        return all(e.passed for e in self.entries.values())

    def __getitem__(self, key):
        return self.entries[key]

    def summary_lines(self):
        lines = []
        for e in self.entries.values():
            lines.append(f"{e.name}: {'pass' if e.passed else 'FAIL'} (worst margin {e.worst_margin:.3e})")
        lines.append(f"theta = {self.theta:.6g}")
        for k, v in self.constants.items():
            lines.append(f"{k} = {v:.6g}")
        return lines


MARGIN_TOL = 1e-9
RATIO_LIMIT = 0.75


def _draw(sampler, d):
    rng = np.random.default_rng(sampler.seed)
    n = sampler.n_points
    s = {
        "y": rng.uniform(-0.5, 0.5, (n, d)),
        "z": rng.uniform(-0.5, 0.5, (n, d)),
        "zeta": rng.uniform(-sampler.zeta_box, sampler.zeta_box, n),
        "zeta2": rng.uniform(-sampler.zeta_box, sampler.zeta_box, n),
        "lam": rng.uniform(-sampler.lam_box, sampler.lam_box, (n, d)),
        "lam2": rng.uniform(-sampler.lam_box, sampler.lam_box, (n, d)),
        "dir": rng.normal(size=(n, d)),
        "shift_y": rng.integers(-3, 4, (n, d)).astype(float),
        "shift_z": rng.integers(-3, 4, (n, d)).astype(float),
    }
    s["dir"] /= np.linalg.norm(s["dir"], axis=1, keepdims=True)
    return s


def _witness(s, i, keys=("y", "z", "zeta", "lam")):
    return {k: np.asarray(s[k][i]).tolist() for k in keys}


def _crosses(points, direction, delta, ifs):
    """Samples whose segment ``points + [0, delta] direction`` meets a declared interface."""
    hit = np.zeros(points.shape[0], dtype=bool)
    for axis, positions in (ifs or {}).items():
        k = axis - 1
        if k >= points.shape[1]:
            continue
        a = points[:, k]
        b = a + delta * direction[:, k]
        for pos in positions:
            for shift in (-1.0, 0.0, 1.0):
                p = pos + shift
                hit |= (np.minimum(a, b) - 1e-12 <= p) & (p <= np.maximum(a, b) + 1e-12)
    return hit


def _ratio_test(a, s, which, base):
    """Halving test of continuity in ``y`` or ``z``; returns (margin, details, witness index)."""
    deltas = [1e-2 / 2**k for k in range(4)]
    ifs = a.interfaces.get(which, {})
    diffs = []
    skip = np.zeros(len(s["zeta"]), dtype=bool)
    for dlt in deltas:
        skip |= _crosses(s[which], s["dir"], dlt, ifs)
    for dlt in deltas:
        moved = dict(y=s["y"], z=s["z"])
        moved[which] = s[which] + dlt * s["dir"]
        diff = np.linalg.norm(a(moved["y"], moved["z"], s["zeta"], s["lam"]) - base, axis=1)
        diff[skip] = 0.0
        diffs.append(diff)
    scale = max(1.0, float(np.max(np.abs(base))))
    last, prev = diffs[-1].max(), diffs[-2].max()
    idx = int(np.argmax(diffs[-1]))
    details = {"max_diff": [float(d.max()) for d in diffs], "skipped": int(skip.sum())}
    if last <= 1e-10 * scale:
        return 0.0, details, idx
    ratio = last / prev if prev > 0 else math.inf
    details["ratio"] = float(ratio)
    return RATIO_LIMIT - ratio, details, idx


def _index_grid(nf):
    hi = nfm.DEFAULT_GRID[1]
    if math.isfinite(nf.t_max):
        hi = min(hi, nf.t_max)
    return np.geomspace(nfm.DEFAULT_GRID[0], hi, 1024)


def _shards(n, workers):
    workers = max(1, int(workers))
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(workers)]


def _pair_terms(a, s, sl):
    y, z = s["y"][sl], s["z"][sl]
    zt, zt2 = s["zeta"][sl], s["zeta2"][sl]
    lm, lm2 = s["lam"][sl], s["lam2"][sl]
    return {
        "a0": a(y, z, zt, lm),
        "a_l2": a(y, z, zt, lm2),
        "a_z2": a(y, z, zt2, lm),
        "a_both": a(y, z, zt2, lm2),
    }


def verify_hypotheses(a: FluxCoefficient, sampler: Sampler = Sampler()):
    """Sample H1-H6 and fit the tightest constants consistent with the sample.

    Margins are "passes when >= 0" quantities; ``worst_margin`` is the minimum
    over samples and ``witness`` the sample that attains it.
    """
    if a.nf_pair is None:
        raise UsageError("flux has no (Phi, Psi) pair; cannot verify growth hypotheses")
    phi_nf, psi_nf = a.nf_pair
    d = a.dim
    s = _draw(sampler, d)
    n = sampler.n_points
    with ThreadPoolExecutor(max_workers=max(1, sampler.workers)) as pool:
        parts = list(pool.map(lambda sl: _pair_terms(a, s, sl), _shards(n, sampler.workers)))
    t = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    a0 = t["a0"]
    scale = max(1.0, float(np.max(np.abs(a0))))
    entries = {}
    constants = {}

    # H1: continuity in z, and a(., ., 0, 0) bounded
    margin, det, idx = _ratio_test(a, s, "z", a0)
    zero = a(s["y"], s["z"], np.zeros(n), np.zeros((n, d)))
    bounded = bool(np.all(np.isfinite(zero)))
    det["sup_a_at_origin"] = float(np.max(np.abs(zero))) if bounded else math.inf
    entries["H1"] = HypothesisEntry("H1", bounded and margin >= 0, margin, _witness(s, idx), det)

    # H2: index chain and growth constants (c2 = c4 = 1)
    g_phi = nfm.conjugate_inverse_of(phi_nf)
    psi_dual = nfm.nf_conjugate(psi_nf).dual
    ip, iq = nfm.simonenko_indices(phi_nf, _index_grid(phi_nf)), nfm.simonenko_indices(psi_nf, _index_grid(psi_nf))
    chain = min(iq.lower - 1.0, ip.lower - iq.upper)
    dl = np.linalg.norm(s["lam"] - s["lam2"], axis=1)
    dz = np.abs(s["zeta"] - s["zeta2"])
    lam_term = g_phi(dl)
    zeta_term = psi_dual.inverse(phi_nf.value(dz))
    lhs_z = np.linalg.norm(t["a0"] - t["a_z2"], axis=1)
    lhs_l = np.linalg.norm(t["a0"] - t["a_l2"], axis=1)
    lhs_b = np.linalg.norm(t["a0"] - t["a_both"], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c1_fit = float(np.max(np.where(zeta_term > 0, lhs_z / zeta_term, 0.0)))
        c1 = max(c1_fit, 0.5 * (1 + 1e-9))
        excess = np.concatenate([lhs_l, lhs_b - c1 * zeta_term])
        lt = np.concatenate([lam_term, lam_term])
        c3_fit = float(np.max(np.where(lt > 0, excess / lt, 0.0)))
    c3 = max(c3_fit, 0.5 * (1 + 1e-9))
    rhs_b = c1 * zeta_term + c3 * lam_term
    pair_margin = (rhs_b - lhs_b) / scale
    idx = int(np.argmin(pair_margin))
    dom = nfm.check_domination(psi_nf, phi_nf, np.geomspace(1, 100, 41), np.geomspace(1e-3, min(1e3, phi_nf.t_max / 100), 64))
    constants.update(rho0=iq.lower, rho1_low=iq.upper, rho1_high=ip.lower, rho2=ip.upper,
                     c1=c1, c1_fit=c1_fit, c2=1.0, c3=c3, c3_fit=c3_fit, c4=1.0)
    h2_margin = min(chain, float(pair_margin.min()))
    entries["H2"] = HypothesisEntry(
        "H2", h2_margin >= -MARGIN_TOL and math.isfinite(c1) and math.isfinite(c3), h2_margin,
        _witness(s, idx, ("y", "z", "zeta", "zeta2", "lam", "lam2")),
        {"index_chain_margin": chain, "phi_dominates_psi": dom.dominates, "domination_k": dom.k},
    )

    # H3: coercivity against the degenerate weight
    w = a.weight or DegenerateWeight.constant(0.5)
    gh = g_phi(w(np.abs(s["zeta"])))
    lam_norm = np.linalg.norm(s["lam"], axis=1)
    m3 = np.sum(a0 * s["lam"], axis=1) - gh * phi_nf.value(lam_norm)
    idx = int(np.argmin(m3))
    entries["H3"] = HypothesisEntry("H3", float(m3.min()) >= -MARGIN_TOL, float(m3.min()), _witness(s, idx),
                                    {"weight": w.source, "h_min": w.h_min})
    theta = float(g_phi(w.h_min))

    # H4: monotonicity in lambda at fixed zeta
    dlam = s["lam"] - s["lam2"]
    m4 = np.sum((t["a0"] - t["a_l2"]) * dlam, axis=1)
    idx = int(np.argmin(m4))
    entries["H4"] = HypothesisEntry("H4", float(m4.min()) >= -MARGIN_TOL, float(m4.min()),
                                    _witness(s, idx, ("y", "z", "zeta", "lam", "lam2")))

    # H5: integer-shift periodicity and uniform continuity in y
    shifted = a(s["y"] + s["shift_y"], s["z"] + s["shift_z"], s["zeta"], s["lam"])
    pdiff = np.linalg.norm(shifted - a0, axis=1)
    per_ok = float(pdiff.max()) <= 1e-12 * scale
    ym, ydet, yidx = _ratio_test(a, s, "y", a0)
    idx = int(np.argmax(pdiff)) if not per_ok else yidx
    h5_margin = min(-float(pdiff.max()), ym)
    entries["H5"] = HypothesisEntry(
        "H5", per_ok and ym >= 0 and a.periodic, h5_margin, _witness(s, idx),
        {"max_shift_diff": float(pdiff.max()), "y_continuity": ydet},
    )

    # H6: strong monotonicity, c5 fitted at equal zeta; cross-zeta value reported
    phid = phi_nf.value(np.linalg.norm(dlam, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(phid > 0, m4 / phid, np.inf)
        cross = np.sum((t["a0"] - t["a_both"]) * dlam, axis=1)
        qx = np.where(phid > 0, cross / phid, np.inf)
    c5 = float(q.min())
    idx = int(np.argmin(q))
    constants.update(c5=c5, c5_cross_zeta=float(qx.min()))
    entries["H6"] = HypothesisEntry("H6", c5 > 0, c5, _witness(s, idx, ("y", "z", "zeta", "lam", "lam2")),
                                    {"c5_cross_zeta": float(qx.min())})
    return HypothesisReport(entries, theta, constants)


def check_jacobian(a: FluxCoefficient, n_points=200, seed=0, lam_box=2.0):
    """Largest violation of ``|J - J_fd| <= max(1e-5, 1e-4 |a|)`` over random samples (<= 0 passes)."""
    s = _draw(Sampler(n_points, seed, lam_box), a.dim)
    ja = a.jacobian(s["y"], s["z"], s["zeta"], s["lam"], "analytic")
    jf = a.jacobian(s["y"], s["z"], s["zeta"], s["lam"], "fd")
    av = np.linalg.norm(a(s["y"], s["z"], s["zeta"], s["lam"]), axis=1)
    bound = np.maximum(1e-5, 1e-4 * av)[:, None, None]
    return float(np.max(np.abs(ja - jf) - bound))


def check_periodicity(a: FluxCoefficient, n_points=100, seed=0):
    s = _draw(Sampler(n_points, seed), a.dim)
    base = a(s["y"], s["z"], s["zeta"], s["lam"])
    e1 = np.zeros(a.dim)
    e1[0] = 1.0
    return float(np.max(np.abs(a(s["y"] + e1, s["z"], s["zeta"], s["lam"]) - base)))


__all__ = [
    "DegenerateWeight", "FluxCoefficient", "HypothesisEntry", "HypothesisReport", "Sampler",
    "check_jacobian", "check_periodicity", "flux_from_config", "make_custom", "make_degenerate",
    "make_linear_separable", "make_phi_laplacian", "verify_hypotheses",
]
