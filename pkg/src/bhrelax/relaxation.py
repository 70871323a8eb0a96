"""Energies ``F`` and ``G`` and numerical checks of the relaxation sandwich.

``F[u] = int f(x, D^2 u)`` for fields with integrable Hessian and

    G[u] = int Q_2 f(x, D^2 u) dx + int (Q_2 f)^inf(x, dD_s(grad u)/d|D_s(grad u)|) d|D_s(grad u)|

for BH fields.  The upper bound is probed with area-strict mollifications,
the lower bound with structured admissible sequences.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import measures as ms
from .bh_fields import BHField, _cell_rule, hessian_measure, norms
from .envelope import DEFAULT_STARTS, EnvelopeBackend, convexify_1d
from .extension import mollified_sequence
from .integrands import Integrand, SamplePlan, coercivize, validate
from .tensor_core import frobenius

LIMINF_TAIL = 5
PROBE_SCHEDULE = (64, 128, 256, 512, 1024)
TABLE_STEP = 0.25
TABLE_DENSE = 4.0
DISTINCT_LIMIT = 16


# ---------------------------------------------------------------- energy setup

@dataclass
class EnergySpec:
    """Integrand plus envelope and recession settings."""

    f: Integrand
    N: int = 1
    d: int = 1
    levels: Optional[Tuple[int, ...]] = None
    starts: int = DEFAULT_STARTS
    seed: int = 0
    recession_schedule: Optional[np.ndarray] = None
    liminf_tail: int = LIMINF_TAIL
    table_step: float = TABLE_STEP
    backend: EnvelopeBackend = field(init=False, repr=False)

    def __post_init__(self):
        report = validate(self.f, SamplePlan.default(self.N, self.d))
        failed = [k for k in ("H1", "H2") if not report.passed.get(k, True)]
        if failed:
            raise ValueError(f"integrand {self.f.name!r} violates {', '.join(failed)}")
        if self.liminf_tail < 1:
            raise ValueError("liminf tail must be positive")
        self.backend = EnvelopeBackend(self.f, self.levels, self.starts, self.seed, self.recession_schedule)

    def with_integrand(self, f: Integrand) -> "EnergySpec":
        return EnergySpec(f, self.N, self.d, self.levels, self.starts, self.seed, self.recession_schedule,
                          self.liminf_tail, self.table_step)

    def scaled(self, s: float) -> "EnergySpec":
        return self.with_integrand(self.f.scaled(s))


def coercive_regularize(spec: EnergySpec, eps: float) -> EnergySpec:
    """Spec with ``f + eps |.|`` (the same spec for ``eps = 0``)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return spec
    return spec.with_integrand(coercivize(spec.f, eps))


def _table_grid(lo: float, hi: float, step: float) -> np.ndarray:
    span = max(hi - lo, 1e-3)
    plo, phi = lo - 0.2 * span, hi + 0.2 * span
    dense = np.arange(-TABLE_DENSE, TABLE_DENSE + 0.5 * step, step)
    geo = TABLE_DENSE * 2.0 ** np.arange(1, 64)
    geo = geo[geo <= 2 * max(abs(plo), abs(phi)) + TABLE_DENSE]
    nodes = np.concatenate([dense, geo, -geo])
    return np.sort(nodes[(nodes >= plo) & (nodes <= phi)])


def envelope_values(spec: EnergySpec, X, Hs) -> np.ndarray:
    """``Q_2 f(x_p, H_p)`` for a batch of points and Hessians."""
    X = np.asarray(X, dtype=float)
    Hs = np.asarray(Hs, dtype=float)
    f, be = spec.f, spec.backend
    if f.convex:
        return np.asarray(f(X, Hs), dtype=float)
    flat = Hs.reshape(Hs.shape[0], -1)
    if be.x_independent:
        uniq, inv = np.unique(np.round(flat, 12), axis=0, return_inverse=True)
        inv = np.asarray(inv).reshape(-1)
        if uniq.shape[0] <= DISTINCT_LIMIT:
            ref = X[0] if X.ndim == 2 else np.zeros(spec.N)
            vals = np.array([be.value(ref, u.reshape(Hs.shape[1:])) for u in uniq])
            return vals[inv]
        if flat.shape[1] == 1:
            lo, hi = float(flat.min()), float(flat.max())
            tab = be.table
            if tab is None or lo < tab.h_grid[0] or hi > tab.h_grid[-1]:
                if tab is not None:
                    lo, hi = min(lo, float(tab.h_grid[0])), max(hi, float(tab.h_grid[-1]))
                be.prepare_table(np.zeros(spec.N), lo, hi, grid=_table_grid(lo, hi, spec.table_step))
            return np.asarray(be.table(flat[:, 0]), dtype=float)
    return np.array([be.value(x, H) for x, H in zip(X, Hs)])


# ---------------------------------------------------------------- energies

@dataclass
class GEnergy:
    ac: float
    singular: float
    warnings: List[str]

    @property
    def total(self) -> float:
        return self.ac + self.singular


def energy_F(u, spec: EnergySpec, domain: Optional[ms.GridDomain] = None, n: int = 4) -> float:
    """``int f(x, D^2 u)`` by cellwise Gauss quadrature.

    ``u`` needs a ``hessian`` method; BH fields with gradient jumps are
    rejected.
    """
    if isinstance(u, BHField) and u.has_jumps():
        raise ValueError("field has a singular Hessian part; use energy_relaxed_G")
    if isinstance(u, SequenceTerm):
        return u.energy(spec.f)
    dom = u.domain if domain is None else domain
    X, W = _cell_rule(dom, None, n)
    return float(W @ spec.f(X, u.hessian(X)))


def _singular_part(mu: ms.RadonMeasure, spec: EnergySpec) -> float:
    be = spec.backend
    shape = mu.value_shape
    cache: Dict[tuple, float] = {}

    def rec(x, w):
        nrm = float(np.linalg.norm(w))
        if nrm == 0:
            return 0.0
        H = (w / nrm).reshape(shape)
        if spec.f.convex or be.x_independent:
            key = tuple(np.round(w / nrm, 12)) + (() if be.x_independent else tuple(np.round(x, 12)))
            if key not in cache:
                cache[key] = be.recession(x, H)
            return nrm * cache[key]
        return nrm * be.recession(x, H)

    total = 0.0
    for p in mu.singular:
        if isinstance(p, ms.Atom):
            total += rec(p.location, p.weight)
        else:
            pts, W, dens = p.rule(pieces=4)
            total += sum(wq * rec(x, dq) for x, wq, dq in zip(pts, W, dens))
    return float(total)


def energy_relaxed_G(u: BHField, spec: EnergySpec, n: int = 4) -> GEnergy:
    """``int Q_2 f(x, D^2 u) + int (Q_2 f)^inf(x, polar) d|D_s grad u|``."""
    cuts = [r.c for r in u.ridges] if u.N == 1 else None
    X, W = _cell_rule(u.domain, cuts, n)
    ac = float(W @ envelope_values(spec, X, u.hessian(X)))
    sing = _singular_part(hessian_measure(u), spec)
    return GEnergy(ac, sing, list(spec.backend.warnings))


# ---------------------------------------------------------------- sequences

@dataclass
class SequenceTerm:
    """A smooth field sampled at quadrature nodes of the domain."""

    n: int
    nodes: np.ndarray  # (P, N)
    weights: np.ndarray  # (P,)
    values: np.ndarray  # (P, d)
    grads: np.ndarray  # (P, d, N)
    hessians: np.ndarray  # (P, d, N, N)

    def energy(self, f: Callable) -> float:
        return float(self.weights @ np.asarray(f(self.nodes, self.hessians), dtype=float))

    def substituted(self, spec: EnergySpec) -> float:
        return float(self.weights @ envelope_values(spec, self.nodes, self.hessians))

    def l1_gap(self, u) -> float:
        return float(self.weights @ np.linalg.norm(self.values - u.value(self.nodes), axis=-1))

    def w11_gap(self, u) -> float:
        g = (self.grads - u.grad(self.nodes)).reshape(self.nodes.shape[0], -1)
        return self.l1_gap(u) + float(self.weights @ np.linalg.norm(g, axis=-1))

    def w21_norm(self) -> float:
        P = self.nodes.shape[0]
        parts = [np.linalg.norm(a.reshape(P, -1), axis=-1) for a in (self.values, self.grads, self.hessians)]
        return float(self.weights @ sum(parts))


def mollification_terms(u: BHField, n_schedule: Sequence[int], cells_per_eps: int = 8) -> List[SequenceTerm]:
    seq = mollified_sequence(u, n_schedule, cells_per_eps)
    w = seq.region_weights()
    live = w > 0
    nodes = seq.grid.nodes().reshape(-1, u.N)[live]
    out = []
    for t in seq.terms:
        H = t.hessian.ac.reshape(-1, u.d, u.N, u.N)[live]
        out.append(SequenceTerm(t.n, nodes, w[live], t.values[live], t.grads[live], H))
    return out


def _require_1d(u: BHField, name: str) -> None:
    if u.N != 1 or u.d != 1:
        raise NotImplementedError(f"the {name} generator is implemented for N = d = 1")


def _integrate_1d(u: BHField, n: int, lo: float, h: float, H: np.ndarray) -> SequenceTerm:
    """Exact double integral of a piecewise-constant second derivative with ``u``'s data at ``lo``."""
    M = H.size
    g0 = float(u.grad(np.array([[lo]]))[0, 0, 0])
    v0 = float(u.value(np.array([[lo]]))[0, 0])
    ge = g0 + h * np.concatenate([[0.0], np.cumsum(H)])
    ve = v0 + np.concatenate([[0.0], np.cumsum(h * ge[:-1] + 0.5 * h * h * H)])
    gc = ge[:-1] + 0.5 * h * H
    vc = ve[:-1] + 0.5 * h * ge[:-1] + 0.125 * h * h * H
    x = lo + h * (np.arange(M) + 0.5)
    return SequenceTerm(n, x[:, None], np.full(M, h), vc[:, None], gc[:, None, None], H[:, None, None, None])


def _fine_cells(u: BHField, n: int, per_period: int) -> Tuple[float, float, int]:
    lo, hi = float(u.domain.lo[0]), float(u.domain.hi[0])
    M = int(per_period * n * np.ceil(hi - lo))
    return lo, (hi - lo) / M, M


def laminate_terms(u: BHField, spec: EnergySpec, n_schedule: Sequence[int], per_period: int = 16,
                   hull_pad: float = 8.0, hull_points: int = 4001) -> List[SequenceTerm]:
    """Two-state oscillations of the absolutely continuous part plus spikes at the atoms.

    On each period ``1/n`` the second derivative takes the endpoints of the
    supporting segment of the convexified integrand below ``D^2 u(x)`` with
    the matching volume fractions; each atom of weight ``a`` becomes a
    spike of height ``a n`` on an interval of length ``1/n``.
    """
    _require_1d(u, "laminate")
    mu = hessian_measure(u)
    x0 = np.zeros(1)
    out = []
    for n in n_schedule:
        lo, h, M = _fine_cells(u, n, per_period)
        x = lo + h * (np.arange(M) + 0.5)
        Hac = u.hessian(x[:, None]).reshape(-1)
        grid_t = np.linspace(Hac.min() - hull_pad, Hac.max() + hull_pad, hull_points)
        hull = convexify_1d(grid_t, spec.f(np.broadcast_to(x0, (grid_t.size, 1)), grid_t[:, None, None, None]))
        seg = np.array([hull.supporting_segment(float(t)) for t in Hac])
        tm, tp = seg[:, 0], seg[:, 1]
        theta = np.where(tp > tm, (Hac - tm) / np.where(tp > tm, tp - tm, 1.0), 1.0)
        phase = np.mod((x - lo) * n, 1.0)
        H = np.where(phase < theta, tp, tm)
        for p in mu.atoms():
            c = float(p.location[0])
            band = np.abs(x - c) < 0.5 / n
            H = np.where(band, Hac + float(p.weight[0]) * n, H)
        out.append(_integrate_1d(u, n, lo, h, H))
    return out


def oscillation_terms(u: BHField, n_schedule: Sequence[int], amplitude: float = 0.5, frequency: int = 3,
                      cells_per_eps: int = 8) -> List[SequenceTerm]:
    """Mollifications with an added Hessian oscillation ``A sin(2 pi k n x)``."""
    _require_1d(u, "oscillation")
    base = mollification_terms(u, n_schedule, cells_per_eps)
    out = []
    for t in base:
        om = 2 * np.pi * frequency * t.n
        x = t.nodes[:, 0]
        add_h = amplitude * np.sin(om * x)
        add_g = amplitude * (1.0 - np.cos(om * x)) / om
        add_v = amplitude * (x - np.sin(om * x) / om) / om
        x0 = float(u.domain.lo[0])
        add_v = add_v - amplitude * (x0 - np.sin(om * x0) / om) / om
        add_g = add_g - amplitude * (1.0 - np.cos(om * x0)) / om
        out.append(SequenceTerm(t.n, t.nodes, t.weights, t.values + add_v[:, None], t.grads + add_g[:, None, None],
                                t.hessians + add_h[:, None, None, None]))
    return out


GENERATORS = ("mollification", "laminate", "oscillation")


def generate(name: str, u: BHField, spec: EnergySpec, n_schedule: Sequence[int]) -> List[SequenceTerm]:
    if name == "mollification":
        return mollification_terms(u, n_schedule)
    if name == "laminate":
        return laminate_terms(u, spec, n_schedule)
    if name == "oscillation":
        return oscillation_terms(u, n_schedule)
    raise KeyError(f"unknown sequence generator {name!r}; choose from {GENERATORS}")


# ---------------------------------------------------------------- reports

def liminf_surrogate(values: Sequence[float], tail: int = LIMINF_TAIL) -> float:
    """Minimum over the last ``tail`` terms (an under-approximation of the liminf)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty sequence")
    return float(np.min(v[-min(tail, v.size):]))


@dataclass
class ProbeResult:
    name: str
    n: List[int]
    energies: List[float]
    l1_gaps: List[float]
    w11_gaps: List[float]
    w21_norms: List[float]
    admissible: bool
    reason: str
    liminf: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RelaxationReport:
    kind: str
    G_value: float
    F_sequence: List[float]
    raw_sequence: List[float]
    gap: float
    diagnostics: List[dict]
    verdicts: Dict[str, bool]
    probes: List[ProbeResult] = field(default_factory=list)
    tightest: Optional[str] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "probes"}
        d["probes"] = [p.to_dict() for p in self.probes]
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "n", "energy", "raw_energy"])
            if self.kind == "upper":
                for diag, e, r in zip(self.diagnostics, self.F_sequence, self.raw_sequence):
                    w.writerow(["mollification", diag["n"], repr(e), repr(r)])
            for p in self.probes:
                for n, e in zip(p.n, p.energies):
                    w.writerow([p.name, n, repr(e), repr(e)])


def _rel_tol(tol: float, ref: float) -> float:
    return tol * max(1.0, abs(ref))


def verify_upper_bound(u: BHField, spec: EnergySpec, n_schedule: Sequence[int], tol: float = 0.02,
                       cells_per_eps: int = 8, G: Optional[GEnergy] = None) -> RelaxationReport:
    """Envelope-substituted and raw energies along area-strict mollifications.

    Passes when the last substituted energy is within ``tol`` (relative to
    ``max(1, |G|)``) of ``G[u]``.
    """
    G = energy_relaxed_G(u, spec) if G is None else G
    seq = mollified_sequence(u, n_schedule, cells_per_eps)
    w = seq.region_weights()
    live = w > 0
    nodes = seq.grid.nodes().reshape(-1, u.N)[live]
    limit = seq.limit
    tests = ms.bump_test_functions(u.domain)
    ref_pairs = [ms.pair(limit, psi) for psi in tests]
    area_lim = ms.area_functional(limit)
    sub, raw, diags = [], [], []
    for t in seq.terms:
        H = t.hessian.ac.reshape(-1, u.d, u.N, u.N)[live]
        sub.append(float(w[live] @ envelope_values(spec, nodes, H)))
        raw.append(float(w[live] @ spec.f(nodes, H)))
        area = ms.area_functional(t.hessian, (u.domain.lo, u.domain.hi))
        ws = [float(np.max(np.abs(ms.pair(t.hessian, psi) - r))) for psi, r in zip(tests, ref_pairs)]
        diags.append({"n": t.n, "eps": t.eps, "area": area, "area_gap": abs(area - area_lim),
                      "weakstar_gap": max(ws)})
    Gv = G.total
    verdicts = {"upper_bound": abs(sub[-1] - Gv) <= _rel_tol(tol, Gv),
                "raw_not_below_substituted": all(r >= s - 1e-9 for r, s in zip(raw, sub))}
    return RelaxationReport("upper", Gv, sub, raw, liminf_surrogate(sub, spec.liminf_tail) - Gv, diags, verdicts,
                            warnings=list(G.warnings) + list(spec.backend.warnings))


def probe_lower_bound(u: BHField, spec: EnergySpec, generators: Sequence[str] = GENERATORS,
                      n_schedule: Sequence[int] = PROBE_SCHEDULE, tol: float = 0.02,
                      l1_tol: float = 1e-2, w21_factor: float = 10.0,
                      G: Optional[GEnergy] = None) -> RelaxationReport:
    """Raw energies ``F[u_n]`` along structured admissible sequences.

    A sequence is admissible when its last ``L^1`` gap is below ``l1_tol``
    (relative to ``max(1, ||u||_1)``), the gaps decrease over the schedule
    and the ``W^{2,1}`` norms stay below ``w21_factor (1 + ||u||_BH)``.
    Passes when no admissible liminf surrogate is below ``G[u] - tol``.
    """
    G = energy_relaxed_G(u, spec) if G is None else G
    Gv = G.total
    nrm = norms(u)
    bound = w21_factor * (1.0 + nrm.bh)
    probes = []
    for name in generators:
        terms = generate(name, u, spec, n_schedule)
        energies = [t.energy(spec.f) for t in terms]
        l1 = [t.l1_gap(u) for t in terms]
        w11 = [t.w11_gap(u) for t in terms]
        w21 = [t.w21_norm() for t in terms]
        reason = ""
        if l1[-1] > l1_tol * max(1.0, nrm.l1) or (len(l1) > 1 and l1[-1] > l1[0]):
            reason = f"no L1 convergence (last gap {l1[-1]:.3g})"
        elif max(w21) > bound:
            reason = f"W21 norm {max(w21):.3g} exceeds bound {bound:.3g}"
        probes.append(ProbeResult(name, [t.n for t in terms], energies, l1, w11, w21, not reason, reason,
                                  liminf_surrogate(energies, spec.liminf_tail)))
    admissible = [p for p in probes if p.admissible]
    if not admissible:
        raise RuntimeError("no admissible probe sequence")
    tight = min(admissible, key=lambda p: p.liminf)
    verdicts = {"lower_bound": all(p.liminf >= Gv - _rel_tol(tol, Gv) for p in admissible)}
    return RelaxationReport("lower", Gv, tight.energies, tight.energies, tight.liminf - Gv,
                            [{"name": p.name, "liminf": p.liminf, "admissible": p.admissible} for p in probes],
                            verdicts, probes, tight.name, list(G.warnings))


# ---------------------------------------------------------------- coercivization

@dataclass
class CoercivizationReport:
    eps: float
    G_base: float
    G_regularized: float
    difference: float
    bound: float
    table_margin: float
    passed: bool


def coercivization_check(u: BHField, spec: EnergySpec, eps: float, H_grid=None, tol: float = 1e-8,
                         envelope_tol: float = 1e-2) -> CoercivizationReport:
    """``Q_2 f_eps >= Q_2 f + eps |H| - 2 envelope_tol`` on ``H_grid`` and ``0 <= G_eps - G <= eps |D grad u| + tol``."""
    reg = coercive_regularize(spec, eps)
    G0 = energy_relaxed_G(u, spec).total
    G1 = energy_relaxed_G(u, reg).total
    bound = eps * norms(u).hessian_tv
    margin = np.inf
    if H_grid is not None:
        Hs = np.asarray(H_grid, dtype=float)
        X = np.zeros((Hs.shape[0], spec.N))
        q0 = envelope_values(spec, X, Hs)
        q1 = envelope_values(reg, X, Hs)
        margin = float(np.min(q1 - q0 - eps * frobenius(Hs)))
    diff = G1 - G0
    ok = -tol <= diff <= bound + tol and margin >= -2 * envelope_tol
    return CoercivizationReport(eps, G0, G1, diff, bound, margin, bool(ok))
