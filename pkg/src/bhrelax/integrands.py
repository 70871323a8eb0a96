"""Integrands ``f(x, H)`` with linear growth, their hypotheses and recession functions.

Evaluators are vectorized: ``x`` has shape ``(..., N)`` and ``H`` shape
``(..., d, N, N)``; the leading axes broadcast against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor_core import LambdaGenerator, as_array, frobenius, is_lambda_direction, random_sym

DEFAULT_SCHEDULE = 2.0 ** np.arange(21)
TAIL = 5
ECLASS_CLAMP = 1e-12


def _norm(H):
    return frobenius(H)


@dataclass(frozen=True)
class Integrand:
    """``f(x, H) >= 0`` with certified metadata.

    Parameters
    ----------
    func : callable
        Vectorized ``f(x, H)``.
    growth_C : float
        Constant in ``0 <= f(x, H) <= C (1 + |H|)``.
    modulus : callable, optional
        Nondecreasing ``omega`` with ``|f(x,H) - f(y,H)| <= omega(|x-y|) (1+|H|)``.
        ``None`` means ``f`` does not depend on ``x``.
    coercivity_c : float, optional
        ``f(x, H) >= c |H|``.
    recession_alpha, rate_C : float, optional
        Certified rate ``|f(x, tH)/t - f^inf(x, H)| <= rate_C / t^alpha`` for ``|H| = 1``.
    grad : callable, optional
        ``df/dH`` with the shape of ``H``.
    convex : bool
        ``f(x, .)`` is convex.
    recession_exact : callable, optional
        Closed-form ``f^inf(x, H)``.
    """

    func: Callable
    growth_C: float
    modulus: Optional[Callable] = None
    coercivity_c: Optional[float] = None
    recession_alpha: Optional[float] = None
    rate_C: Optional[float] = None
    grad: Optional[Callable] = None
    convex: bool = False
    recession_exact: Optional[Callable] = None
    name: str = "custom"
    shape: Optional[Tuple[int, int]] = None  # (N, d) when fixed

    def __post_init__(self):
        if not self.growth_C > 0:
            raise ValueError("growth constant must be positive")
        if self.coercivity_c is not None and not (0 < self.coercivity_c):
            raise ValueError("coercivity constant must be positive")
        if self.recession_alpha is not None and not self.recession_alpha > 1:
            raise ValueError("recession rate exponent must exceed 1")

    def __call__(self, x, H):
        x = np.asarray(x, dtype=float)
        H = as_array(H)
        return np.asarray(self.func(x, H), dtype=float)

    def value(self, H, x=None) -> float:
        H = as_array(H)
        if x is None:
            x = np.zeros(H.shape[-1])
        return float(self(x, H))

    def scaled(self, s: float) -> "Integrand":
        s = float(s)
        if not s > 0:
            raise ValueError("scale must be positive")
        g = self.grad
        rec = self.recession_exact
        mod = self.modulus
        return replace(
            self,
            func=lambda x, H, f=self.func: s * f(x, H),
            growth_C=s * self.growth_C,
            modulus=None if mod is None else (lambda r, m=mod: s * m(r)),
            coercivity_c=None if self.coercivity_c is None else s * self.coercivity_c,
            rate_C=None if self.rate_C is None else s * self.rate_C,
            grad=None if g is None else (lambda x, H, g=g: s * g(x, H)),
            recession_exact=None if rec is None else (lambda x, H, r=rec: s * r(x, H)),
            name=f"{s:g}*{self.name}",
        )


# ---------------------------------------------------------------- catalog

def _unit_grad(H):
    n = _norm(H)
    safe = np.where(n > 0, n, 1.0)
    return (H / safe[..., None, None, None]) * (n > 0)[..., None, None, None]


def area_integrand() -> Integrand:
    def f(x, H):
        return np.sqrt(1.0 + np.sum(H * H, axis=(-3, -2, -1)))

    def g(x, H):
        return H / f(x, H)[..., None, None, None]

    return Integrand(f, 1.0, coercivity_c=None, recession_alpha=2.0, rate_C=0.5, grad=g, convex=True,
                     recession_exact=lambda x, H: _norm(H), name="area")


def tv_integrand() -> Integrand:
    return Integrand(lambda x, H: _norm(H), 1.0, coercivity_c=1.0, recession_alpha=2.0, rate_C=0.0,
                     grad=lambda x, H: _unit_grad(H), convex=True,
                     recession_exact=lambda x, H: _norm(H), name="tv")


def default_well(N: int = 1, d: int = 1) -> np.ndarray:
    a = np.zeros(d)
    a[0] = 1.0
    b = np.zeros(N)
    b[0] = 1.0
    return LambdaGenerator(a, b).tensor()


def double_well_integrand(A=None, N: int = 1, d: int = 1) -> Integrand:
    """``min(|H - A|, |H + A|)`` for a unit Lambda tensor ``A``."""
    A = default_well(N, d) if A is None else as_array(A)
    if abs(float(frobenius(A)) - 1.0) > 1e-12 or is_lambda_direction(A, 1e-10) is None:
        raise ValueError("double-well centre must be a unit Lambda tensor")

    def f(x, H):
        return np.minimum(_norm(H - A), _norm(H + A))

    def g(x, H):
        plus = _norm(H - A) <= _norm(H + A)
        return np.where(plus[..., None, None, None], _unit_grad(H - A), _unit_grad(H + A))

    return Integrand(f, 1.0, recession_alpha=2.0, rate_C=1.0, grad=g, convex=False,
                     recession_exact=lambda x, H: _norm(H), name="double-well",
                     shape=(A.shape[1], A.shape[0]))


def x_weighted_integrand(radius: float = 1.0) -> Integrand:
    """``(1 + x_1^2) |H|`` on ``|x_1| <= radius``."""
    R = float(radius)

    def f(x, H):
        return (1.0 + x[..., 0] ** 2) * _norm(H)

    def g(x, H):
        return (1.0 + x[..., 0] ** 2)[..., None, None, None] * _unit_grad(H)

    return Integrand(f, 1.0 + R * R, modulus=lambda s: 2.0 * R * np.asarray(s), coercivity_c=1.0,
                     recession_alpha=2.0, rate_C=0.0, grad=g, convex=True,
                     recession_exact=f, name="x-weighted")


CATALOG = {
    "area": area_integrand,
    "tv": tv_integrand,
    "double-well": double_well_integrand,
    "x-weighted": x_weighted_integrand,
}


def from_catalog(name: str, **params) -> Integrand:
    try:
        maker = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown integrand {name!r}; choose from {sorted(CATALOG)}") from None
    return maker(**params)


def coercivize(f: Integrand, eps: float) -> Integrand:
    """``f + eps |H|``."""
    eps = float(eps)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return f
    g = f.grad
    rec = f.recession_exact
    return replace(
        f,
        func=lambda x, H, h=f.func: h(x, H) + eps * _norm(H),
        growth_C=f.growth_C + eps,
        coercivity_c=(f.coercivity_c or 0.0) + eps,
        grad=None if g is None else (lambda x, H, g=g: g(x, H) + eps * _unit_grad(H)),
        recession_exact=None if rec is None else (lambda x, H, r=rec: r(x, H) + eps * _norm(H)),
        name=f"{f.name}+{eps:g}|.|",
    )


# ---------------------------------------------------------------- hypotheses

@dataclass
class SamplePlan:
    """Points ``x``, unit tensor directions and radii for hypothesis sampling."""

    x_points: np.ndarray
    directions: np.ndarray
    radii: np.ndarray

    @classmethod
    def default(cls, N: int, d: int, lo=0.0, hi=1.0, n_x: int = 7, n_dir: int = 24,
                radii=(0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1e3), seed: int = 0) -> "SamplePlan":
        rng = np.random.default_rng(seed)
        axes = [np.linspace(lo, hi, n_x)] * N
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
        D = random_sym(rng, d, N, n_dir)
        D /= frobenius(D)[:, None, None, None]
        return cls(X, D, np.asarray(radii, dtype=float))

    def tensors(self) -> np.ndarray:
        return (self.radii[:, None, None, None, None] * self.directions[None]).reshape((-1,) + self.directions.shape[1:])


@dataclass
class HypothesisReport:
    margins: Dict[str, float]
    passed: Dict[str, bool]
    inf_ratio: float
    samples: int

    def __bool__(self):
        return all(self.passed.values())


def validate(f: Integrand, plan: SamplePlan, strict: bool = False, tol: float = 1e-12) -> HypothesisReport:
    Hs = plan.tensors()
    X = plan.x_points
    vals = f(X[:, None, :], Hs[None])  # (nx, nH)
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"non-finite evaluation of integrand {f.name!r}")
    nH = _norm(Hs)[None, :]
    margins, passed = {}, {}
    h1 = float(np.min(f.growth_C * (1.0 + nH) - vals))
    margins["H1"] = min(h1, float(np.min(vals)))
    passed["H1"] = margins["H1"] >= -tol * f.growth_C
    if f.modulus is None:
        spread = float(np.max(np.ptp(vals, axis=0))) if X.shape[0] > 1 else 0.0
        margins["H2"] = -spread
        passed["H2"] = spread <= tol
    else:
        worst = np.inf
        for i in range(X.shape[0]):
            dist = np.linalg.norm(X[i] - X, axis=1)
            bound = np.asarray(f.modulus(dist), dtype=float)[:, None] * (1.0 + nH)
            worst = min(worst, float(np.min(bound - np.abs(vals[i] - vals))))
        margins["H2"] = worst
        passed["H2"] = worst >= -tol
    nonzero = nH[0] > 0
    ratio = float(np.min(vals[:, nonzero] / nH[:, nonzero])) if np.any(nonzero) else np.inf
    if f.coercivity_c is not None:
        margins["H3"] = float(np.min(vals - f.coercivity_c * nH))
        passed["H3"] = margins["H3"] >= -tol
    report = HypothesisReport(margins, passed, ratio, int(vals.size))
    if strict and not report:
        failed = [k for k, ok in passed.items() if not ok]
        raise ValueError(f"integrand {f.name!r} violates {', '.join(failed)}")
    return report


# ---------------------------------------------------------------- recession

def _check_schedule(t):
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.size < 4:
        raise ValueError("t schedule needs at least 4 points")
    if np.any(np.diff(t) <= 0) or t[0] <= 0:
        raise ValueError("t schedule must be positive and increasing")
    if t[-1] < 1e3:
        raise ValueError("t schedule must reach at least 1e3")
    return t


@dataclass
class RecessionEstimate:
    value: float
    quotients: np.ndarray
    rate_worst: Optional[float] = None
    rate_ok: Optional[bool] = None
    monotone: Optional[bool] = None


def recession(f: Integrand, x, H, t_schedule=None, tail: int = TAIL) -> RecessionEstimate:
    """Limsup surrogate for ``f^inf(x, H)``.

    The quotients ``f(x, t H^)/t`` are taken along the unit direction
    ``H^ = H/|H|`` and the result is scaled by ``|H|``, so the estimate is
    positively 1-homogeneous by construction.
    """
    t = _check_schedule(DEFAULT_SCHEDULE if t_schedule is None else t_schedule)
    H = as_array(H)
    x = np.asarray(x, dtype=float)
    nrm = float(frobenius(H))
    if nrm == 0.0:
        return RecessionEstimate(0.0, np.zeros_like(t), None, None, None)
    U = H / nrm
    q = f(x, t[:, None, None, None] * U) / t
    k = min(tail, t.size)
    unit_val = float(np.max(q[-k:]))
    est = RecessionEstimate(nrm * unit_val, q * nrm)
    if f.recession_alpha is not None and f.rate_C is not None:
        ref = float(f.recession_exact(x, U)) if f.recession_exact is not None else unit_val
        gap = np.abs(q - ref) * t ** f.recession_alpha
        est.rate_worst = float(np.max(gap))
        est.rate_ok = bool(est.rate_worst <= f.rate_C * (1 + 1e-9) + 1e-9)
    if f.convex:
        f0 = float(f(x, np.zeros_like(U)))
        dq = (f(x, t[:, None, None, None] * U) - f0) / t
        est.monotone = bool(np.all(np.diff(dq) >= -1e-12 * max(1.0, float(np.max(np.abs(dq))))))
        if not est.monotone:
            raise AssertionError("difference quotients of a convex integrand are not nondecreasing")
    return est


@dataclass(frozen=True)
class RecessionFn:
    """Positively 1-homogeneous ``(x, H) -> f^inf(x, H)``."""

    f: Integrand
    source: str
    t_schedule: Optional[np.ndarray] = None

    def __call__(self, x, H):
        H = as_array(H)
        x = np.asarray(x, dtype=float)
        if self.source == "analytic":
            return np.asarray(self.f.recession_exact(x, H), dtype=float)
        batch = H.shape[:-3]
        xb = np.broadcast_to(x, batch + x.shape[-1:])
        out = np.empty(batch)
        for idx in np.ndindex(*batch):
            out[idx] = recession(self.f, xb[idx], H[idx], self.t_schedule).value
        return out if batch else float(out)


def recession_function(f: Integrand, estimated: bool = False, t_schedule=None) -> RecessionFn:
    if f.recession_exact is not None and not estimated:
        return RecessionFn(f, "analytic")
    t = DEFAULT_SCHEDULE if t_schedule is None else _check_schedule(t_schedule)
    return RecessionFn(f, f"estimated(t_max={t[-1]:g}, alpha={f.recession_alpha})", t)


def default_neighborhood_sampler(x, H, seed: int = 0, k_range=range(12, 21), per_level: int = 4) -> Iterator:
    """Triples ``(x', H', t)`` with ``|x' - x|, |H' - H| <= 1/t``."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    H = as_array(H)
    for k in k_range:
        t = 2.0 ** k
        for _ in range(per_level):
            dx = rng.standard_normal(x.shape)
            dH = rng.standard_normal(H.shape)
            dH = 0.5 * (dH + np.swapaxes(dH, -1, -2))
            dx *= rng.uniform() / (t * max(np.linalg.norm(dx), 1e-300))
            dH *= rng.uniform() / (t * max(float(frobenius(dH)), 1e-300))
            yield x + dx, H + dH, t


@dataclass
class LowerUpperRecession:
    lower: float
    upper: float
    samples: int
    in_lambda: bool


def lower_upper_recession(f: Integrand, x, H, sampler: Optional[Iterable] = None, lambda_tol: float = 1e-3) -> LowerUpperRecession:
    """Sampled ``f_#`` (min) and ``f^#`` (max) of ``f(x', t H')/t``."""
    if sampler is None:
        sampler = default_neighborhood_sampler(x, H)
    vals = [float(f(xp, t * as_array(Hp))) / t for xp, Hp, t in sampler]
    if not vals:
        raise ValueError("neighborhood sampler produced no samples")
    lo, hi = min(vals), max(vals)
    in_lambda = is_lambda_direction(H, 1e-10) is not None
    if in_lambda and hi - lo > lambda_tol * max(1.0, abs(hi)):
        raise AssertionError(f"lower and upper recession differ by {hi - lo:.3g} on a Lambda direction")
    return LowerUpperRecession(lo, hi, len(vals), in_lambda)


# ---------------------------------------------------------------- E-class transform

@dataclass
class RadialLimit:
    direction: np.ndarray
    values: np.ndarray
    limit: float
    cauchy: bool
    recession: Optional[float]


class EClassTransform:
    """``xi -> (1 - |xi|) f(x, xi / (1 - |xi|))`` on the open unit ball."""

    def __init__(self, f: Integrand, x):
        self.f = f
        self.x = np.asarray(x, dtype=float)
        self.clamped = False

    def __call__(self, xi):
        xi = as_array(xi)
        r = frobenius(xi)
        if np.any(r >= 1.0):
            raise ValueError("E-class transform is defined on the open unit ball")
        gap = 1.0 - r
        small = gap < ECLASS_CLAMP
        if np.any(small):
            self.clamped = True
            gap = np.maximum(gap, ECLASS_CLAMP)
        with np.errstate(over="ignore", invalid="ignore"):
            val = gap * self.f(self.x, xi / gap[..., None, None, None])
        if not np.all(np.isfinite(val)):
            self.clamped = True
            val = np.where(np.isfinite(val), val, np.nan)
        return val

    def radial_limits(self, directions, levels: int = 30, tol: float = 1e-6) -> List[RadialLimit]:
        s = 1.0 - 2.0 ** -np.arange(1, levels + 1)
        rec = recession_function(self.f) if self.f.recession_exact is not None else None
        out = []
        for D in directions:
            D = as_array(D)
            U = D / float(frobenius(D))
            vals = np.array([float(self(si * U)) for si in s])
            cauchy = bool(abs(vals[-1] - vals[-2]) < tol)
            r = float(rec(self.x, U)) if rec is not None else None
            out.append(RadialLimit(U, vals, float(vals[-1]), cauchy, r))
        return out


def eclass_transform(f: Integrand, x) -> EClassTransform:
    return EClassTransform(f, x)
