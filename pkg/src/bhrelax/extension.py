"""Extension of BH fields across special Lipschitz boundaries.

A special Lipschitz domain is the epigraph ``{y_N > phi(y')}`` in local
coordinates ``y = R (x - origin)``.  The extension of ``u`` to a point
below the graph averages ``u`` along the inward vertical line,

    E[u](x) = int_1^2 u(x + lambda delta(x) n) psi(lambda) dlambda,

where ``n = R^T e_N``, ``delta = kappa rho`` is a multiple of the
regularized distance ``rho`` and ``psi(lambda) = 28 - 18 lambda`` has unit
mass and vanishing first moment, so polynomials of degree one are
reproduced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import measures as ms
from .bh_fields import BHField, FieldNorms, SampledField, hessian_measure, norms
from .quadrature import ball_rule, bump, gauss_legendre, mollifier_ball_rule

RHO_TOL = 1e-10
RHO_MAX_ITER = 60
FD_STEP = 1e-6
N_LAMBDA = 32
SLOPE_TARGET = -2.0
PARTITION_FRACTION = 0.125


# ---------------------------------------------------------------- boundary graphs

@dataclass(frozen=True)
class PiecewiseLinearGraph:
    """Graph of a piecewise-linear function of one variable, extended linearly."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 2:
            raise ValueError("need matching knot and value arrays with at least two entries")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must increase")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.knots)

    def lipschitz(self) -> float:
        return float(np.max(np.abs(self.slopes())))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        k, v, sl = self.knots, self.values, self.slopes()
        out = np.interp(s, k, v)
        out = np.where(s < k[0], v[0] + sl[0] * (s - k[0]), out)
        return np.where(s > k[-1], v[-1] + sl[-1] * (s - k[-1]), out)

    def distance(self, y: np.ndarray) -> np.ndarray:
        """Euclidean distance from points ``y`` (shape ``(..., 2)``) to the graph."""
        P = np.stack([self.knots, self.values], axis=-1)
        A = P[:-1]
        D = P[1:] - P[:-1]
        upper = np.ones(len(D))
        lower = np.zeros(len(D))
        lower[0] = -np.inf
        upper[-1] = np.inf
        rel = y[..., None, :] - A
        t = np.sum(rel * D, axis=-1) / np.sum(D * D, axis=-1)
        t = np.clip(t, lower, upper)
        diff = rel - t[..., None] * D
        return np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=-1))

    def distance_and_direction(self, y: np.ndarray):
        """Distance and unit vector from the nearest graph point towards ``y``."""
        P = np.stack([self.knots, self.values], axis=-1)
        A = P[:-1]
        D = P[1:] - P[:-1]
        upper = np.ones(len(D))
        lower = np.zeros(len(D))
        lower[0] = -np.inf
        upper[-1] = np.inf
        rel = y[..., None, :] - A
        t = np.clip(np.sum(rel * D, axis=-1) / np.sum(D * D, axis=-1), lower, upper)
        diff = rel - t[..., None] * D
        sq = np.sum(diff * diff, axis=-1)
        j = np.argmin(sq, axis=-1)
        best = np.take_along_axis(diff, j[..., None, None], axis=-2)[..., 0, :]
        dist = np.sqrt(np.take_along_axis(sq, j[..., None], axis=-1)[..., 0])
        unit = best / np.maximum(dist, 1e-300)[..., None]
        return dist, unit

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "values": self.values.tolist()}


class SpecialLipschitzDomain:
    """``{x : y_N > phi(y')}`` with ``y = R (x - origin)``.

    ``phi`` is a number for ``N = 1``; for ``N = 2`` a
    :class:`PiecewiseLinearGraph` or a vectorized callable.
    """

    def __init__(self, N: int, phi, L: float, rotation=None, origin=None, check: bool = True):
        if N not in (1, 2):
            raise NotImplementedError("special Lipschitz domains are implemented for N = 1, 2")
        self.N = N
        self.phi = float(phi) if N == 1 else phi
        self.L = float(L)
        self.R = np.eye(N) if rotation is None else np.asarray(rotation, dtype=float)
        self.origin = np.zeros(N) if origin is None else np.asarray(origin, dtype=float)
        if np.max(np.abs(self.R @ self.R.T - np.eye(N))) > 1e-12:
            raise ValueError("rotation must be orthogonal")
        if self.L < 0:
            raise ValueError("Lipschitz constant must be nonnegative")
        if check and N == 2:
            self.check_lipschitz()

    # constructors
    @classmethod
    def half_space(cls, N: int = 2) -> "SpecialLipschitzDomain":
        phi = 0.0 if N == 1 else PiecewiseLinearGraph([-1.0, 1.0], [0.0, 0.0])
        return cls(N, phi, 0.0)

    @classmethod
    def wedge(cls, rotation=None, origin=None) -> "SpecialLipschitzDomain":
        return cls(2, PiecewiseLinearGraph([-1.0, 0.0, 1.0], [1.0, 0.0, 1.0]), 1.0, rotation, origin)

    @classmethod
    def from_table(cls, knots, values, L: Optional[float] = None, **kw) -> "SpecialLipschitzDomain":
        g = PiecewiseLinearGraph(knots, values)
        return cls(2, g, g.lipschitz() if L is None else L, **kw)

    @property
    def normal(self) -> np.ndarray:
        """Inward vertical direction ``R^T e_N`` in global coordinates."""
        return self.R.T[:, -1]

    def to_local(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.origin) @ self.R.T

    def graph(self, s):
        if self.N == 1:
            return np.full(np.shape(s)[:-1] if np.ndim(s) else (), self.phi)
        return self.phi(s)

    def height(self, x) -> np.ndarray:
        """``y_N - phi(y')``: positive inside."""
        y = self.to_local(x)
        if self.N == 1:
            return y[..., 0] - self.phi
        return y[..., 1] - self.phi(y[..., 0])

    def contains(self, x) -> np.ndarray:
        return self.height(x) > 0

    def check_lipschitz(self, samples: int = 400, seed: int = 0) -> float:
        if isinstance(self.phi, PiecewiseLinearGraph):
            worst = self.phi.lipschitz()
        else:
            rng = np.random.default_rng(seed)
            a = rng.uniform(-2, 2, samples)
            b = a + rng.uniform(-0.5, 0.5, samples)
            keep = np.abs(a - b) > 1e-12
            worst = float(np.max(np.abs(self.phi(a[keep]) - self.phi(b[keep])) / np.abs(a[keep] - b[keep])))
        if worst > self.L * (1 + 1e-12) + 1e-12:
            raise ValueError(f"boundary graph has slope {worst:.4g} above the stated constant {self.L:.4g}")
        return worst

    def to_dict(self) -> dict:
        phi = self.phi if self.N == 1 else (self.phi.to_dict() if isinstance(self.phi, PiecewiseLinearGraph) else None)
        if self.N == 2 and phi is None:
            raise ValueError("only tabulated boundary graphs can be serialized")
        return {"N": self.N, "phi": phi, "L": self.L, "rotation": self.R.tolist(), "origin": self.origin.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SpecialLipschitzDomain":
        phi = d["phi"] if d["N"] == 1 else PiecewiseLinearGraph(d["phi"]["knots"], d["phi"]["values"])
        return cls(d["N"], phi, d["L"], d.get("rotation"), d.get("origin"))


# ---------------------------------------------------------------- distances

def _callable_distance(phi: Callable, y: np.ndarray, n_grid: int = 401, widen: int = 6) -> np.ndarray:
    flat = y.reshape(-1, 2)
    P = flat.shape[0]
    W = np.abs(flat[:, 1] - phi(flat[:, 0])) + 1e-3
    best = np.empty(P)
    todo = np.arange(P)
    for _ in range(widen):
        if todo.size == 0:
            break
        s = flat[todo, 0:1] + W[todo, None] * np.linspace(-1.0, 1.0, n_grid)
        dist = np.hypot(s - flat[todo, 0:1], phi(s) - flat[todo, 1:2])
        j = np.argmin(dist, axis=1)
        edge = (j == 0) | (j == n_grid - 1)
        spacing = 2.0 * W[todo] / (n_grid - 1)
        centre = s[np.arange(todo.size), j]
        for _ in range(2):
            s2 = centre[:, None] + 2 * spacing[:, None] * np.linspace(-1.0, 1.0, n_grid)
            d2 = np.hypot(s2 - flat[todo, 0:1], phi(s2) - flat[todo, 1:2])
            j2 = np.argmin(d2, axis=1)
            centre = s2[np.arange(todo.size), j2]
            spacing = 4 * spacing / (n_grid - 1)
        best[todo] = np.hypot(centre - flat[todo, 0], phi(centre) - flat[todo, 1])
        W[todo[edge]] *= 2.0
        todo = todo[edge]
    if todo.size:
        raise RuntimeError("distance minimizer stays on the search window boundary")
    return best.reshape(y.shape[:-1])


def signed_distance(domain: SpecialLipschitzDomain, x) -> np.ndarray:
    """Distance to the boundary, positive outside and negative inside."""
    y = domain.to_local(x)
    if domain.N == 1:
        return domain.phi - y[..., 0]
    if isinstance(domain.phi, PiecewiseLinearGraph):
        dist = domain.phi.distance(y)
    else:
        dist = _callable_distance(domain.phi, y)
    h = y[..., 1] - domain.graph(y[..., 0])
    return np.where(h > 0, -dist, dist)


def signed_distance_grad(domain: SpecialLipschitzDomain, x) -> Optional[np.ndarray]:
    """Gradient of :func:`signed_distance` (``None`` for callable graphs)."""
    y = domain.to_local(x)
    if domain.N == 1:
        g = -np.ones(y.shape)
    elif isinstance(domain.phi, PiecewiseLinearGraph):
        _, unit = domain.phi.distance_and_direction(y)
        h = y[..., 1] - domain.graph(y[..., 0])
        g = np.where((h > 0)[..., None], -unit, unit)
    else:
        return None
    return g @ domain.R


@dataclass
class FixedPointResult:
    rho: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    refined: bool = False


def _G(domain, x, t, rule):
    z, w = rule
    pts = x[:, None, :] - 0.5 * t[:, None, None] * z[None]
    return signed_distance(domain, pts) @ w


def regularized_distance(domain: SpecialLipschitzDomain, x, tol: float = RHO_TOL,
                         max_iter: int = RHO_MAX_ITER) -> FixedPointResult:
    """Fixed point ``rho = G(x, rho)``, ``G(x, t) = int_B d(x - t z/2) phi(z) dz``.

    ``G`` is a contraction in ``t`` with factor 1/2.  If the observed
    contraction is worse the ball rule is refined once.
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, domain.N)
    for attempt, sizes in enumerate(((12, 12), (24, 24))):
        rule = mollifier_ball_rule(domain.N, *sizes)
        t = signed_distance(domain, flat)
        res = np.full(t.shape, np.inf)
        iters = np.zeros(t.shape, dtype=int)
        active = np.ones(t.shape, dtype=bool)
        prev = None
        contracting = True
        for it in range(max_iter):
            g = _G(domain, flat[active], t[active], rule)
            r = np.abs(g - t[active])
            if prev is not None:
                ratio = r / np.maximum(prev[active], 1e-300)
                if np.any((ratio > 0.5 + 1e-6) & (prev[active] > 1e3 * tol)):
                    contracting = False
            full_r = np.zeros_like(res)
            full_r[active] = r
            prev = np.where(active, full_r, 0.0)
            t[active] = g
            res[active] = r
            iters[active] = it + 1
            done = r < tol
            idx = np.flatnonzero(active)
            active[idx[done]] = False
            if not active.any():
                break
        # report the true residual at the returned value
        final = np.abs(_G(domain, flat, t, rule) - t)
        if contracting and np.all(final < max(tol, 1e-15) * 1.0000001 + 1e-16) or (contracting and not active.any()):
            return FixedPointResult(t.reshape(x.shape[:-1]), final.reshape(x.shape[:-1]),
                                    iters.reshape(x.shape[:-1]), attempt > 0)
    raise RuntimeError("regularized distance iteration does not converge")


def regularized_distance_grad(domain: SpecialLipschitzDomain, x, rho) -> Optional[np.ndarray]:
    """``grad rho = G_x / (1 - G_t)`` from the quadrature rule of the fixed point."""
    z, w = mollifier_ball_rule(domain.N, 12, 12)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pts = x[:, None, :] - 0.5 * np.asarray(rho)[:, None, None] * z[None]
    g = signed_distance_grad(domain, pts)
    if g is None:
        return None
    Gx = np.einsum("pqi,q->pi", g, w)
    Gt = -0.5 * np.einsum("pqi,qi,q->p", g, z, w)
    return Gx / (1.0 - Gt)[:, None]


def vertical_slope(domain: SpecialLipschitzDomain, x, h: float = 1e-5, tol: float = 1e-12) -> np.ndarray:
    """Central difference of ``rho`` along the inward vertical direction."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = domain.normal
    up = regularized_distance(domain, x + h * n, tol).rho
    dn = regularized_distance(domain, x - h * n, tol).rho
    return (up - dn) / (2 * h)


# ---------------------------------------------------------------- moment kernel

@dataclass(frozen=True)
class MomentKernel:
    """``psi(lambda) = a + b lambda`` on ``[1, 2]`` with exact rational moments."""

    a: Fraction
    b: Fraction
    validate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "a", Fraction(self.a))
        object.__setattr__(self, "b", Fraction(self.b))
        if self.validate and (self.moment(0) != 1 or self.moment(1) != 0):
            raise ValueError("kernel must have unit mass and zero first moment")

    def moment(self, k: int) -> Fraction:
        """``int_1^2 lambda^k psi(lambda) dlambda``."""
        return (self.a * Fraction(2 ** (k + 1) - 1, k + 1) + self.b * Fraction(2 ** (k + 2) - 1, k + 2))

    def __call__(self, lam):
        return float(self.a) + float(self.b) * np.asarray(lam, dtype=float)

    def sup(self) -> float:
        return float(max(abs(self.a + self.b), abs(self.a + 2 * self.b)))


def moment_kernel() -> MomentKernel:
    # a + 3b/2 = 1 and 3a/2 + 7b/3 = 0
    A = np.array([[Fraction(1), Fraction(3, 2)], [Fraction(3, 2), Fraction(7, 3)]], dtype=object)
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    a = (Fraction(1) * A[1, 1] - A[0, 1] * 0) / det
    b = (A[0, 0] * 0 - A[1, 0] * Fraction(1)) / det
    return MomentKernel(a, b)


def broken_moment_kernel() -> MomentKernel:
    """Kernel with a wrong first moment, for fault-injection runs."""
    return MomentKernel(Fraction(27), Fraction(-17), validate=False)


# ---------------------------------------------------------------- extension operator

@dataclass
class ExtensionValues:
    values: np.ndarray
    grads: np.ndarray
    delta: np.ndarray
    exterior: np.ndarray


def _ridges_of(u):
    base = getattr(u, "base", u)
    return getattr(base, "ridges", ())


class ExtensionOperator:
    """``E[u]`` for one special Lipschitz domain.

    ``kappa`` defaults to ``3 (1 + L^2)``; it is validated on a grid below
    the boundary (``d delta / d n <= -2`` and the first lookup point inside
    the domain) and doubled once if the validation fails.  An explicit
    ``kappa`` is validated but never changed.
    """

    def __init__(self, domain: SpecialLipschitzDomain, kernel: Optional[MomentKernel] = None,
                 kappa: Optional[float] = None, n_lambda: int = N_LAMBDA, tol: float = 1e-12,
                 validation_points=None, container=None):
        self.domain = domain
        self.container = None if container is None else (np.asarray(container[0], float), np.asarray(container[1], float))
        self.kernel = moment_kernel() if kernel is None else kernel
        self.n_lambda = n_lambda
        self.tol = tol
        self.kappa0 = 3.0 * (1.0 + domain.L ** 2)
        pts = self.default_validation_points() if validation_points is None else np.asarray(validation_points, float)
        self.evidence: Dict[str, float] = {}
        if kappa is not None:
            self.kappa = float(kappa)
            ok, ev = self._validate(self.kappa, pts)
            self.evidence = dict(ev, kappa=self.kappa, doubled=0.0)
            if not ok:
                raise ValueError(f"kappa = {kappa} fails validation: {ev}")
        else:
            self.kappa = self.kappa0
            ok, ev = self._validate(self.kappa, pts)
            doubled = 0.0
            if not ok:
                self.kappa *= 2.0
                doubled = 1.0
                ok, ev = self._validate(self.kappa, pts)
                if not ok:
                    raise RuntimeError(f"kappa calibration failed: {ev}")
            self.evidence = dict(ev, kappa=self.kappa, doubled=doubled)

    def default_validation_points(self) -> np.ndarray:
        dom = self.domain
        offsets = np.array([1e-3, 1e-2, 0.1, 0.3, 1.0])
        if dom.N == 1:
            y = np.stack([dom.phi - offsets], axis=-1)
        else:
            s = np.linspace(-1.0, 1.0, 9)
            S, O = np.meshgrid(s, offsets, indexing="ij")
            y = np.stack([S.ravel(), dom.graph(S.ravel()) - O.ravel()], axis=-1)
        return y @ dom.R + dom.origin

    def _validate(self, kappa: float, pts) -> Tuple[bool, Dict[str, float]]:
        slope = kappa * vertical_slope(self.domain, pts, tol=min(self.tol, 1e-12))
        rho = regularized_distance(self.domain, pts, self.tol).rho
        lookup = pts + (kappa * rho)[:, None] * self.domain.normal
        clearance = self.domain.height(lookup)
        ev = {"max_slope": float(np.max(slope)), "min_clearance": float(np.min(clearance))}
        return bool(ev["max_slope"] <= SLOPE_TARGET + 1e-6 and ev["min_clearance"] > 0), ev

    def delta(self, x) -> np.ndarray:
        return self.kappa * regularized_distance(self.domain, x, self.tol).rho

    def grad_delta(self, x, h: float = FD_STEP, rho=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if rho is not None:
            g = regularized_distance_grad(self.domain, x, rho)
            if g is not None:
                return self.kappa * g
        N = self.domain.N
        out = np.zeros(x.shape)
        for i in range(N):
            e = np.zeros(N)
            e[i] = h
            out[:, i] = (self.delta(x + e) - self.delta(x - e)) / (2 * h)
        return out

    def _lambda_rules(self, x, delta, u):
        """Gauss rules on [1, 2] split where the lookup line crosses a jump plane of ``u``."""
        P = x.shape[0]
        n = self.domain.normal
        breaks = [np.ones(P), 2 * np.ones(P)]
        for r in _ridges_of(u):
            denom = delta * float(r.nu @ n)
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = (r.c - x @ r.nu) / denom
            lam = np.where(np.isfinite(lam) & (lam > 1) & (lam < 2), lam, 2.0)
            breaks.append(lam)
        B = np.sort(np.stack(breaks, axis=1), axis=1)
        nodes, weights = [], []
        for j in range(B.shape[1] - 1):
            a, b = B[:, j], B[:, j + 1]
            t, w = gauss_legendre(self.n_lambda, 0.0, 1.0)
            nodes.append(a[:, None] + (b - a)[:, None] * t)
            weights.append((b - a)[:, None] * w)
        return np.concatenate(nodes, axis=1), np.concatenate(weights, axis=1)

    def apply(self, u, x) -> ExtensionValues:
        """Values and gradients of ``E[u]`` at ``x`` (inside the domain ``E[u] = u``)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P, N = x.shape
        dom = self.domain
        ext = ~dom.contains(x)
        vals = np.asarray(u.value(x), dtype=float).copy()
        grads = np.asarray(u.grad(x), dtype=float).copy()
        delta = np.zeros(P)
        if ext.any():
            xe = x[ext]
            rho = regularized_distance(dom, xe, self.tol).rho
            de = self.kappa * rho
            delta[ext] = de
            lam, wl = self._lambda_rules(xe, de, u)
            n = dom.normal
            F = xe[:, None, :] + (lam * de[:, None])[..., None] * n
            inside = dom.height(F.reshape(-1, N)) > -1e-12
            if not np.all(inside):
                bad = int(np.argmin(dom.height(F.reshape(-1, N))))
                raise RuntimeError(f"extension lookup escapes the domain at {F.reshape(-1, N)[bad]} "
                                   f"(kappa={self.kappa})")
            if self.container is not None:
                flatF = F.reshape(-1, N)
                slack = 1e-12
                out = np.any((flatF < self.container[0] - slack) | (flatF > self.container[1] + slack), axis=-1)
                if out.any():
                    raise RuntimeError(f"extension lookup leaves the field box at {flatF[np.argmax(out)]}")
            psi = self.kernel(lam) * wl
            uF = np.asarray(u.value(F.reshape(-1, N))).reshape(F.shape[:2] + (-1,))
            gF = np.asarray(u.grad(F.reshape(-1, N))).reshape(F.shape[:2] + (-1, N))
            vals[ext] = np.einsum("pq,pqk->pk", psi, uF)
            gd = self.grad_delta(xe, rho=rho)
            dn = np.einsum("pqki,i->pqk", gF, n)
            grads[ext] = np.einsum("pq,pqki->pki", psi, gF) + \
                np.einsum("pq,pqk,pi->pki", psi * lam, dn, gd)
        return ExtensionValues(vals, grads, delta, ext)


def extend(u, domain: Union[SpecialLipschitzDomain, ExtensionOperator], x, kappa: Optional[float] = None):
    op = domain if isinstance(domain, ExtensionOperator) else ExtensionOperator(domain, kappa=kappa)
    return op.apply(u, x)


# ---------------------------------------------------------------- traces

def half_ball_rule(N: int, n: int = 12):
    """Nodes and weights on ``{|z| < 1, z_N > 0}``."""
    if N == 1:
        z, w = gauss_legendre(16, 0.0, 1.0)
        return z[:, None], w
    r, wr = gauss_legendre(n, 0.0, 1.0)
    th, wt = gauss_legendre(n, 0.0, np.pi)
    R, T = np.meshgrid(r, th, indexing="ij")
    W = np.outer(wr * r, wt).reshape(-1)
    return np.stack([R * np.cos(T), R * np.sin(T)], axis=-1).reshape(-1, 2), W


@dataclass
class TraceTable:
    radii: np.ndarray
    value_gaps: np.ndarray  # (n_r,) max over boundary points
    grad_gaps: np.ndarray

    def decreasing(self, slack: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.value_gaps) <= slack) and np.all(np.diff(self.grad_gaps) <= slack))

    def passed(self, tol: float) -> bool:
        return self.decreasing() and self.value_gaps[-1] < tol and self.grad_gaps[-1] < tol


def _is_flat(domain: SpecialLipschitzDomain) -> bool:
    if domain.N == 1:
        return True
    return isinstance(domain.phi, PiecewiseLinearGraph) and float(np.max(np.abs(domain.phi.slopes()))) == 0.0


def trace_gap(u, domain: Union[SpecialLipschitzDomain, ExtensionOperator], r_schedule, boundary_points,
              n: int = 12) -> TraceTable:
    """Interior and exterior ball averages of ``u``, ``grad u`` against ``E[u]``, ``grad E[u]``.

    ``r_schedule`` should decrease.  Flat boundaries use exact half-ball
    rules; otherwise a full-ball rule is split by the domain indicator.
    """
    op = domain if isinstance(domain, ExtensionOperator) else ExtensionOperator(domain)
    dom = op.domain
    x0 = np.atleast_2d(np.asarray(boundary_points, dtype=float))
    radii = np.asarray(r_schedule, dtype=float)
    vg, gg = np.zeros(radii.size), np.zeros(radii.size)
    flat = _is_flat(dom)
    for j, r in enumerate(radii):
        worst_v = worst_g = 0.0
        for p in x0:
            if flat:
                z, w = half_ball_rule(dom.N, n)
                up = z @ dom.R
                pin, win = p + r * up, w
                pout, wout = p - r * up, w
            else:
                z, w = ball_rule(dom.N, n, 2 * n)
                pts = p + r * z
                inside = dom.contains(pts)
                pin, win = pts[inside], w[inside]
                pout, wout = pts[~inside], w[~inside]
            if win.sum() == 0 or wout.sum() == 0:
                continue
            ui = np.asarray(u.value(pin))
            gi = np.asarray(u.grad(pin))
            ev = op.apply(u, pout)
            av = lambda a, ww: np.tensordot(ww / ww.sum(), a, axes=(0, 0))
            worst_v = max(worst_v, float(np.linalg.norm(av(ui, win) - av(ev.values, wout))))
            worst_g = max(worst_g, float(np.linalg.norm(av(gi, win) - av(ev.grads, wout))))
        vg[j], gg[j] = worst_v, worst_g
    return TraceTable(radii, vg, gg)


def boundary_jump(u, op: ExtensionOperator, boundary_points, h: float = 1e-7) -> np.ndarray:
    """``|grad E[u](x0 - h n) - grad u(x0 + h n)|`` extrapolated to ``h -> 0``."""
    x0 = np.atleast_2d(np.asarray(boundary_points, dtype=float))
    n = op.domain.normal
    out = []
    for hh in (h, 2 * h):
        gi = np.asarray(u.grad(x0 + hh * n))
        ge = op.apply(u, x0 - hh * n).grads
        out.append(ge - gi)
    jump = 2 * out[0] - out[1]
    return np.linalg.norm(jump.reshape(x0.shape[0], -1), axis=-1)


# ---------------------------------------------------------------- bounded boxes

def smooth_step(t):
    """C-infinity step: 0 for ``t <= 0``, 1 for ``t >= 1``; returns value and derivative."""
    t = np.asarray(t, dtype=float)
    tp = np.clip(t, 1e-3, None)
    tm = np.clip(1.0 - t, 1e-3, None)
    f1 = np.where(t > 0, np.exp(-1.0 / tp), 0.0)
    f2 = np.where(t < 1, np.exp(-1.0 / tm), 0.0)
    s = f1 / (f1 + f2)
    df1 = np.where(t > 0, f1 / tp ** 2, 0.0)
    df2 = np.where(t < 1, f2 / tm ** 2, 0.0)
    ds = (df1 * f2 + f1 * df2) / (f1 + f2) ** 2
    return s, ds


def _axis_partition(x, a: float, b: float):
    """``(chi_lo, chi_mid, chi_hi)`` and derivatives on one axis."""
    eta = PARTITION_FRACTION * (b - a)
    s_lo, ds_lo = smooth_step((x - (a + eta)) / eta)
    s_hi, ds_hi = smooth_step((x - (b - 2 * eta)) / eta)
    lo, dlo = 1.0 - s_lo, -ds_lo / eta
    hi, dhi = s_hi, ds_hi / eta
    mid, dmid = 1.0 - lo - hi, -dlo - dhi
    return (lo, mid, hi), (dlo, dmid, dhi)


def minimal_kappa(domain: SpecialLipschitzDomain, points=None, safety: float = 1.02) -> float:
    """Smallest ``kappa`` with ``kappa * d rho / d n <= -2`` on the validation points, times ``safety``."""
    probe = ExtensionOperator.__new__(ExtensionOperator)
    probe.domain = domain
    pts = ExtensionOperator.default_validation_points(probe) if points is None else np.asarray(points, float)
    slope = float(np.max(vertical_slope(domain, pts)))
    if slope >= 0:
        raise RuntimeError("regularized distance does not decrease along the inward direction")
    return safety * 2.0 / abs(slope)


class BoundedExtension:
    """Extension of a field on an interval or a 2D box by a partition of unity.

    ``E[u] = sum_i chi_i E_i[u]`` where the pieces are the interior
    (``E_0 = u``), half-lines or half-planes for the faces and 45-degree
    wedges (``L = 1``) for the corners.  Each ``chi_i`` vanishes on the part
    of its piece domain outside the box, and every lookup must stay in the
    box, so only values of ``u`` on the box enter.
    """

    def __init__(self, u, lo, hi, kernel: Optional[MomentKernel] = None, kappa: Union[str, float, None] = "minimal"):
        self.u = u
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        N = self.lo.size
        if N not in (1, 2):
            raise NotImplementedError("bounded extension supports intervals and 2D boxes")
        self.N = N
        self.pieces: List[Tuple[Optional[ExtensionOperator], Callable]] = []
        for combo in np.ndindex(*(3,) * N):
            self.pieces.append((self._piece_operator(combo, kernel, kappa), self._cutoff(combo)))

    def _cutoff(self, combo):
        lo, hi, N = self.lo, self.hi, self.N

        def chi(x):
            x = np.asarray(x, dtype=float)
            vals, ders = [], []
            for k in range(N):
                (c, dc) = _axis_partition(x[..., k], lo[k], hi[k])
                vals.append(c[combo[k]])
                ders.append(dc[combo[k]])
            v = np.prod(np.stack(vals, axis=-1), axis=-1)
            g = np.zeros(x.shape)
            for k in range(N):
                others = np.prod(np.stack([vals[j] for j in range(N) if j != k] or [np.ones_like(v)], axis=-1), axis=-1)
                g[..., k] = ders[k] * others
            return v, g
        return chi

    def _operator(self, dom, kernel, kappa):
        if kappa == "minimal":
            kappa = minimal_kappa(dom)
        return ExtensionOperator(dom, kernel, kappa=kappa, container=(self.lo, self.hi))

    def _piece_operator(self, combo, kernel, kappa):
        N, lo, hi = self.N, self.lo, self.hi
        sides = [c for c in combo if c != 1]
        if not sides:
            return None
        if N == 1:
            if combo[0] == 0:
                dom = SpecialLipschitzDomain(1, lo[0], 0.0)
            else:
                dom = SpecialLipschitzDomain(1, -hi[0], 0.0, rotation=[[-1.0]])
            return self._operator(dom, kernel, kappa)
        if len(sides) == 1:
            k = [i for i in range(2) if combo[i] != 1][0]
            sgn = 1.0 if combo[k] == 0 else -1.0
            origin = np.zeros(2)
            origin[k] = lo[k] if combo[k] == 0 else hi[k]
            R = np.array([[sgn, 0.0], [0.0, sgn]]) if k == 1 else np.array([[0.0, -sgn], [sgn, 0.0]])
            dom = SpecialLipschitzDomain(2, PiecewiseLinearGraph([-1.0, 1.0], [0.0, 0.0]), 0.0, R, origin)
            return self._operator(dom, kernel, kappa)
        corner = np.array([lo[0] if combo[0] == 0 else hi[0], lo[1] if combo[1] == 0 else hi[1]])
        sx = 1.0 if combo[0] == 0 else -1.0
        sy = 1.0 if combo[1] == 0 else -1.0
        # (sx (x - cx), sy (y - cy)) lies in the positive quadrant; rotate by 45 degrees
        c = 1.0 / np.sqrt(2.0)
        R = np.array([[c, -c], [c, c]]) @ np.diag([sx, sy])
        if np.linalg.det(R) < 0:
            R = np.diag([-1.0, 1.0]) @ R
        return self._operator(SpecialLipschitzDomain.wedge(R, corner), kernel, kappa)

    def inside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def apply(self, x) -> ExtensionValues:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P = x.shape[0]
        d = self.u.d
        vals = np.zeros((P, d))
        grads = np.zeros((P, d, self.N))
        for op, chi in self.pieces:
            c, dc = chi(x)
            live = c > 0
            if not live.any():
                continue
            if op is None:
                v, g = np.asarray(self.u.value(x[live])), np.asarray(self.u.grad(x[live]))
            else:
                ev = op.apply(self.u, x[live])
                v, g = ev.values, ev.grads
            vals[live] += c[live, None] * v
            grads[live] += c[live, None, None] * g + np.einsum("pk,pi->pki", v, dc[live])
        return ExtensionValues(vals, grads, np.zeros(P), ~self.inside(x))

    def value(self, x):
        return self.apply(x).values

    def grad(self, x):
        return self.apply(x).grads

    def boundary_points(self, per_face: int = 5) -> np.ndarray:
        if self.N == 1:
            return np.array([[self.lo[0]], [self.hi[0]]])
        pts = []
        for k in range(2):
            other = 1 - k
            s = np.linspace(self.lo[other], self.hi[other], per_face + 2)[1:-1]
            for off in (self.lo[k], self.hi[k]):
                p = np.zeros((s.size, 2))
                p[:, k] = off
                p[:, other] = s
                pts.append(p)
        return np.concatenate(pts)

    def boundary_jump_mass(self, h: float = 1e-7, per_face: int = 5) -> float:
        """Gradient jump across the boundary integrated against surface measure (sampled)."""
        pts = self.boundary_points(per_face)
        total = 0.0
        for p in pts:
            n = np.zeros(self.N)
            k = int(np.argmin(np.minimum(np.abs(p - self.lo), np.abs(p - self.hi))))
            n[k] = 1.0 if abs(p[k] - self.lo[k]) < abs(p[k] - self.hi[k]) else -1.0
            jumps = []
            for hh in (h, 2 * h):
                gi = np.asarray(self.u.grad((p + hh * n)[None]))
                ge = self.apply((p - hh * n)[None]).grads
                jumps.append(ge - gi)
            jump = float(np.linalg.norm(2 * jumps[0] - jumps[1]))
            if self.N == 1:
                total += jump
            else:
                total += jump * float(self.hi[1 - k] - self.lo[1 - k]) / per_face
        return total


def extend_bounded(u, lo=None, hi=None, kernel: Optional[MomentKernel] = None,
                   kappa: Union[str, float, None] = "minimal") -> BoundedExtension:
    if lo is None or hi is None:
        lo, hi = u.domain.lo, u.domain.hi
    return BoundedExtension(u, lo, hi, kernel, kappa)


# ---------------------------------------------------------------- smooth approximation

@dataclass
class ApproximationTerm:
    n: int
    eps: float
    area: float
    area_gap: float
    weakstar: np.ndarray
    w11_gap: float
    hessian_l1: float


@dataclass
class ApproximationReport:
    terms: List[ApproximationTerm]
    area_target: float
    area_strict: ms.AreaStrictReport
    boundary_mass: float

    @property
    def final_area_gap(self) -> float:
        return self.terms[-1].area_gap / self.area_target

    def rows(self):
        for t in self.terms:
            yield [t.n, t.eps, t.area, t.area_gap, float(np.max(t.weakstar)), t.w11_gap]


def _extended_grid(u: BHField, margin: float, h: float) -> ms.GridDomain:
    lo, hi = u.domain.lo, u.domain.hi
    k = int(np.ceil(margin / h - 1e-9)) + 2
    cells = np.round((hi - lo) / h).astype(int) + 2 * k
    return ms.GridDomain(lo - k * h, hi + k * h, tuple(cells))


def _check_boundary_charge(u: BHField) -> None:
    mu = hessian_measure(u)
    lo, hi = u.domain.lo, u.domain.hi
    for p in mu.singular:
        if isinstance(p, ms.Atom):
            on = np.any(np.isclose(p.location, lo) | np.isclose(p.location, hi))
        else:
            on = any(abs(float(p.normal @ np.eye(u.N)[k])) > 1 - 1e-12 and
                     (np.isclose(p.origin[k], lo[k]) or np.isclose(p.origin[k], hi[k])) for k in range(u.N))
        if on:
            raise ValueError("singular Hessian mass on the domain boundary is not supported")


def extended_hessian_measure(u: BHField, ext: BoundedExtension,
                             grid: ms.GridDomain) -> Tuple[ms.RadonMeasure, SampledField]:
    """Hessian measure of ``E[u]`` on ``grid``: exact inside, grid-differenced gradients outside."""
    N, d = u.N, u.d
    nodes = grid.nodes().reshape(-1, N)
    inside = ext.inside(nodes)
    ev = ext.apply(nodes)
    H = np.zeros((nodes.shape[0], d, N, N))
    H[inside] = u.hessian(nodes[inside])
    if not inside.all():
        G = ev.grads.reshape(grid.cells + (d, N))
        Hg = np.stack([np.gradient(G, grid.h[j], axis=j, edge_order=2) for j in range(N)], axis=-1)
        Hg = Hg.reshape(-1, d, N, N)
        H[~inside] = 0.5 * (Hg[~inside] + np.swapaxes(Hg[~inside], -1, -2))
    mu_in = hessian_measure(u)
    pieces = []
    for p in mu_in.singular:
        if isinstance(p, ms.Atom):
            pieces.append(p)
        else:
            box = p.clip(u.domain.lo, u.domain.hi)
            if box is not None:
                pieces.append(ms.Facet(p.origin, p.tangents, box[0], box[1], p.density, p.normal))
    mu = ms.RadonMeasure(grid, H.reshape(grid.cells + (d * N * N,)), tuple(pieces), (d, N, N))
    sampled = SampledField(grid, ev.values.reshape(grid.cells + (d,)), ev.grads.reshape(grid.cells + (d, N)),
                           H.reshape(grid.cells + (d, N, N)))
    return mu, sampled


@dataclass
class MollifiedTerm:
    n: int
    eps: float
    hessian: ms.RadonMeasure  # ac measure on the enlarged grid
    values: np.ndarray  # (P, d) at the enlarged grid nodes
    grads: np.ndarray  # (P, d, N)


@dataclass
class MollifiedSequence:
    u: BHField
    grid: ms.GridDomain
    extension: BoundedExtension
    limit: ms.RadonMeasure
    terms: List[MollifiedTerm]

    def region_weights(self) -> np.ndarray:
        """Cell volumes of the enlarged grid clipped to the box of ``u``."""
        return self.grid.overlap_weights(self.u.domain.lo, self.u.domain.hi).reshape(-1) * self.grid.cell_volume


def mollified_sequence(u: BHField, n_schedule: Sequence[int], cells_per_eps: int = 8,
                       margin: Optional[float] = None, kernel: Optional[MomentKernel] = None) -> MollifiedSequence:
    """``E[u] * phi_{1/n}`` on one enlarged grid for every ``n`` in the schedule."""
    n_schedule = [int(n) for n in n_schedule]
    if not n_schedule or min(n_schedule) < 1:
        raise ValueError("n schedule must be a nonempty list of positive integers")
    _check_boundary_charge(u)
    lo, hi = u.domain.lo, u.domain.hi
    span = float(np.min(hi - lo))
    eps_max = 1.0 / min(n_schedule)
    eps_min = 1.0 / max(n_schedule)
    if 2 * eps_max >= span:
        raise ValueError("mollification radius too large for the domain")
    if margin is None:
        margin = eps_max
    h = min(eps_min / cells_per_eps, span / 16)
    h = span / np.ceil(span / h)
    grid = _extended_grid(u, margin, h)
    ext = extend_bounded(u, lo, hi, kernel)
    mu_ext, sampled = extended_hessian_measure(u, ext, grid)
    terms = []
    for n in n_schedule:
        eps = 1.0 / n
        moll = ms.mollify(mu_ext, eps, (lo, hi))
        kern = ms.Mollifier(eps).grid_weights(grid.h)
        vals = ms.convolve_ac(grid, sampled.values, eps, kern).reshape(-1, u.d)
        grads = ms.convolve_ac(grid, sampled.grad.reshape(grid.cells + (-1,)), eps, kern).reshape(-1, u.d, u.N)
        terms.append(MollifiedTerm(n, eps, moll.as_measure((u.d, u.N, u.N)), vals, grads))
    return MollifiedSequence(u, grid, ext, hessian_measure(u), terms)


def smooth_approximation(u: BHField, n_schedule: Sequence[int], cells_per_eps: int = 8,
                         margin: Optional[float] = None, tests=None, tol: Optional[float] = None,
                         kernel: Optional[MomentKernel] = None) -> ApproximationReport:
    """``u_n = E[u] * phi_{1/n}`` restricted to the box of ``u``.

    Reports area, weak-* and ``W^{1,1}`` gaps per term.  The limit measure
    is the Hessian measure of ``u`` on its box.
    """
    seq = mollified_sequence(u, n_schedule, cells_per_eps, margin, kernel)
    lo, hi = u.domain.lo, u.domain.hi
    region = (lo, hi)
    limit = seq.limit
    area_target = ms.area_functional(limit)
    if tests is None:
        tests = ms.bump_test_functions(u.domain)
    ref_pairs = [ms.pair(limit, psi) for psi in tests]
    nodes = seq.grid.nodes().reshape(-1, u.N)
    in_w = seq.region_weights()
    u_in = u.value(nodes)
    g_in = u.grad(nodes).reshape(-1, u.d * u.N)
    terms = []
    for t in seq.terms:
        m_n = t.hessian
        area = ms.area_functional(m_n, region)
        gaps = np.array([float(np.max(np.abs(ms.pair(m_n, psi) - ref))) for psi, ref in zip(tests, ref_pairs)])
        w11 = float(in_w @ (np.linalg.norm(t.values - u_in, axis=-1) +
                            np.linalg.norm(t.grads.reshape(-1, u.d * u.N) - g_in, axis=-1)))
        hl1 = float(in_w @ np.linalg.norm(m_n.ac.reshape(-1, u.d * u.N * u.N), axis=-1))
        terms.append(ApproximationTerm(t.n, t.eps, area, abs(area - area_target), gaps, w11, hl1))
    tol = 1e-2 * area_target if tol is None else tol
    strict = ms.check_area_strict([t.hessian for t in seq.terms], limit, tol, tests,
                                  tail=min(2, len(seq.terms)), region=region)
    return ApproximationReport(terms, area_target, strict, seq.extension.boundary_jump_mass())
