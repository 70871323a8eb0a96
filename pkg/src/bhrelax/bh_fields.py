"""Piecewise-polynomial fields of bounded Hessian.

A :class:`BHField` is a cubic polynomial plus a finite sum of ridge
functions ``a (nu . x - c)_+^k`` with ``k in {1, 2, 3}``.  Only ``k = 1``
ridges produce a jump of the gradient, namely ``a (x) nu`` across the plane
``{nu . x = c}``; the corresponding singular Hessian density ``a (x) nu (x) nu``
lies in the Lambda cone by construction, and the field is continuous.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .measures import Atom, Facet, GridDomain, RadonMeasure, axis_facet
from .quadrature import bump, gauss_legendre, gl_batch

CONTINUITY_TOL = 1e-10
GL_CELL = 4
GL_KERNEL = 48


def _monomials(N: int, degree: int = 3):
    return [a for a in itertools.product(range(degree + 1), repeat=N) if sum(a) <= degree]


@dataclass(frozen=True)
class Ridge:
    a: np.ndarray
    nu: np.ndarray
    c: float
    k: int

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        if self.k not in (1, 2, 3):
            raise ValueError("ridge exponent must be 1, 2 or 3")
        if abs(np.linalg.norm(nu) - 1.0) > 1e-12:
            raise ValueError("ridge normal must be a unit vector")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "c", float(self.c))

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "nu": self.nu.tolist(), "c": self.c, "k": self.k}


def _canonical_sign(nu: np.ndarray) -> float:
    nz = np.flatnonzero(np.abs(nu) > 1e-15)
    return 1.0 if nu[nz[0]] > 0 else -1.0


def _power_poly(nu: np.ndarray, c: float, k: int, coeff: np.ndarray) -> Dict[tuple, np.ndarray]:
    """Monomial expansion of ``coeff (nu . x - c)^k``."""
    N = nu.size
    out: Dict[tuple, np.ndarray] = {}
    # multinomial expansion of (sum nu_i x_i + (-c))^k
    terms = list(nu) + [-c]
    for combo in itertools.product(range(N + 1), repeat=k):
        alpha = [0] * N
        w = 1.0
        for j in combo:
            w *= terms[j]
            if j < N:
                alpha[j] += 1
        key = tuple(alpha)
        out[key] = out.get(key, 0.0) + w * coeff
    return out


class BHField:
    """``u(x) = p(x) + sum_r a_r (nu_r . x - c_r)_+^{k_r}`` on a box.

    Parameters
    ----------
    domain : GridDomain
        Box and grid used for Hessian sampling and quadrature.
    d : int
        Number of components of ``u``.
    poly : dict
        Monomial exponent tuples of total degree <= 3 mapped to ``R^d`` vectors.
    ridges : sequence of Ridge
    """

    def __init__(self, domain: GridDomain, d: int, poly: Optional[Dict[tuple, Sequence[float]]] = None,
                 ridges: Sequence[Ridge] = ()):
        self.domain = domain
        self.d = int(d)
        N = domain.N
        coeffs: Dict[tuple, np.ndarray] = {}
        for alpha, v in (poly or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != N or sum(alpha) > 3 or min(alpha) < 0:
                raise ValueError(f"monomial {alpha} is not of degree <= 3 in {N} variables")
            v = np.broadcast_to(np.asarray(v, dtype=float), (self.d,)).copy()
            coeffs[alpha] = coeffs.get(alpha, 0.0) + v
        merged: Dict[tuple, np.ndarray] = {}
        for r in ridges:
            if r.nu.size != N or r.a.size != self.d:
                raise ValueError("ridge dimensions do not match the field")
            s = _canonical_sign(r.nu)
            nu, c, a = r.nu, r.c, r.a
            if s < 0:
                nu, c = -nu, -c
                # (-t)_+^k = (-1)^k (t^k - t_+^k)
                for key, v in _power_poly(nu, c, r.k, ((-1.0) ** r.k) * a).items():
                    coeffs[key] = coeffs.get(key, 0.0) + v
                a = ((-1.0) ** (r.k + 1)) * a
            key = tuple(np.round(nu, 14)) + (round(c, 14), r.k)
            if key in merged:
                merged[key] = (merged[key][0] + a, nu, c, r.k)
            else:
                merged[key] = (a, nu, c, r.k)
        self.poly = {k: v for k, v in sorted(coeffs.items()) if np.any(v != 0)}
        self.ridges = tuple(Ridge(a, nu, c, k) for a, nu, c, k in merged.values() if np.any(a != 0))

    @property
    def N(self) -> int:
        return self.domain.N

    # ------------------------------------------------------------ evaluation

    def _poly_eval(self, x, order: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        N, d = self.N, self.d
        lead = x.shape[:-1]
        shape = {0: (d,), 1: (d, N), 2: (d, N, N)}[order]
        out = np.zeros(lead + shape)
        for alpha, v in self.poly.items():
            alpha = np.array(alpha)
            for idx in itertools.product(range(N), repeat=order):
                beta = alpha.copy()
                coef = 1.0
                for i in idx:
                    coef *= beta[i]
                    beta[i] -= 1
                if coef == 0:
                    continue
                mono = np.prod(x ** beta, axis=-1)
                out[(Ellipsis,) + (slice(None),) + idx] += coef * mono[..., None] * v
        return out

    def _ridge_eval(self, x, order: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        N, d = self.N, self.d
        shape = {0: (d,), 1: (d, N), 2: (d, N, N)}[order]
        out = np.zeros(x.shape[:-1] + shape)
        for r in self.ridges:
            s = x @ r.nu - r.c
            sp = np.maximum(s, 0.0)
            if order > r.k:
                continue
            fac = math.factorial(r.k) / math.factorial(r.k - order)
            if r.k == order:
                prof = fac * (s > 0)
            else:
                prof = fac * sp ** (r.k - order)
            if order == 0:
                out += prof[..., None] * r.a
            elif order == 1:
                out += prof[..., None, None] * np.einsum("k,i->ki", r.a, r.nu)
            else:
                out += prof[..., None, None, None] * np.einsum("k,i,j->kij", r.a, r.nu, r.nu)
        return out

    def value(self, x) -> np.ndarray:
        return self._poly_eval(x, 0) + self._ridge_eval(x, 0)

    def grad(self, x) -> np.ndarray:
        return self._poly_eval(x, 1) + self._ridge_eval(x, 1)

    def hessian(self, x) -> np.ndarray:
        """Absolutely continuous part of the Hessian (away from jump planes)."""
        return self._poly_eval(x, 2) + self._ridge_eval(x, 2)

    __call__ = value

    def jump_ridges(self) -> List[Ridge]:
        return [r for r in self.ridges if r.k == 1]

    def has_jumps(self) -> bool:
        return bool(self.jump_ridges())

    def restrict(self, lo, hi, cells) -> "BHField":
        out = BHField.__new__(BHField)
        out.domain = GridDomain.box(lo, hi, cells)
        if not self.domain.contains_box(out.domain.lo, out.domain.hi):
            raise ValueError("restriction box leaves the domain")
        out.d, out.poly, out.ridges = self.d, self.poly, self.ridges
        return out

    def shifted(self, v) -> "BHField":
        """``x -> u(x + v)`` on the same domain."""
        v = np.asarray(v, dtype=float)
        poly: Dict[tuple, np.ndarray] = {}
        for alpha, coef in self.poly.items():
            # expand prod (x_i + v_i)^alpha_i
            ranges = [range(a + 1) for a in alpha]
            for beta in itertools.product(*ranges):
                w = 1.0
                for a, b, vi in zip(alpha, beta, v):
                    w *= math.comb(a, b) * vi ** (a - b)
                poly[beta] = poly.get(beta, 0.0) + w * coef
        ridges = [Ridge(r.a, r.nu, r.c - float(r.nu @ v), r.k) for r in self.ridges]
        return BHField(self.domain, self.d, poly, ridges)

    # ------------------------------------------------------------ io

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "d": self.d,
            "poly": [{"alpha": list(k), "coef": v.tolist()} for k, v in self.poly.items()],
            "ridges": [r.to_dict() for r in self.ridges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BHField":
        poly = {tuple(p["alpha"]): np.array(p["coef"]) for p in data["poly"]}
        ridges = [Ridge(np.array(r["a"]), np.array(r["nu"]), r["c"], r["k"]) for r in data["ridges"]]
        return cls(GridDomain.from_dict(data["domain"]), data["d"], poly, ridges)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "BHField":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path) -> None:
        nodes = self.domain.nodes().reshape(-1, self.N)
        vals = self.value(nodes)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(self.N)] + [f"u{j}" for j in range(self.d)])
            for xr, vr in zip(nodes, vals):
                w.writerow([repr(float(a)) for a in xr] + [repr(float(a)) for a in vr])


# ---------------------------------------------------------------- constructors

def from_pieces_1d(domain: GridDomain, breaks: Sequence[float], polys: Sequence[Sequence]) -> BHField:
    """Scalar or vector field on an interval from polynomial pieces.

    ``polys[j]`` holds power-basis coefficients (constant first, degree <= 3)
    of the piece on ``[breaks[j-1], breaks[j]]``; entries may be vectors.
    """
    if domain.N != 1:
        raise ValueError("from_pieces_1d needs a one-dimensional domain")
    breaks = [float(b) for b in breaks]
    if len(polys) != len(breaks) + 1:
        raise ValueError("need one more polynomial than breakpoints")
    if any(b2 <= b1 for b1, b2 in zip(breaks, breaks[1:])):
        raise ValueError("breakpoints must increase")
    P = []
    for p in polys:
        arr = np.atleast_2d(np.asarray(p, dtype=float).T).T if np.ndim(p) == 2 else np.asarray(p, float)[:, None]
        if arr.shape[0] > 4:
            raise ValueError("pieces must have degree <= 3")
        full = np.zeros((4, arr.shape[1]))
        full[: arr.shape[0]] = arr
        P.append(full)
    d = P[0].shape[1]
    poly = {(k,): P[0][k] for k in range(4)}
    ridges = []
    for j, b in enumerate(breaks):
        diff = P[j + 1] - P[j]
        # re-expand the difference around b: sum_k e_k (x - b)^k
        e = np.zeros_like(diff)
        for k in range(4):
            for i in range(k, 4):
                e[k] += diff[i] * math.comb(i, k) * b ** (i - k)
        if np.max(np.abs(e[0])) > CONTINUITY_TOL * max(1.0, float(np.max(np.abs(P[j])))):
            raise ValueError(f"value-trace mismatch at x = {b}: jump {e[0]}")
        for k in (1, 2, 3):
            if np.any(e[k] != 0):
                ridges.append(Ridge(e[k], [1.0], b, k))
    return BHField(domain, d, poly, ridges)


def kink_1d(c: float = 0.5, slope_jump: float = 2.0, domain: Optional[GridDomain] = None) -> BHField:
    """``(slope_jump/2) |x - c|`` on ``(0, 1)``."""
    domain = domain or GridDomain.box([0.0], [1.0], 256)
    s = 0.5 * slope_jump
    return BHField(domain, 1, {(0,): [s * c], (1,): [-s]}, [Ridge([slope_jump], [1.0], c, 1)])


def ridge_field(domain: GridDomain, nu, c: float, a=(1.0,)) -> BHField:
    """``a max(0, nu . x - c)``."""
    nu = np.asarray(nu, dtype=float)
    return BHField(domain, len(a), {}, [Ridge(a, nu / np.linalg.norm(nu), c, 1)])


def quadratic_field(domain: GridDomain, A) -> BHField:
    """``1/2 x^T A x`` (scalar)."""
    A = np.asarray(A, dtype=float)
    N = domain.N
    poly: Dict[tuple, np.ndarray] = {}
    for i in range(N):
        for j in range(N):
            alpha = [0] * N
            alpha[i] += 1
            alpha[j] += 1
            poly[tuple(alpha)] = poly.get(tuple(alpha), 0.0) + 0.5 * A[i, j] * np.ones(1)
    return BHField(domain, 1, poly)


# ---------------------------------------------------------------- Hessian measure

def _ridge_facet(domain: GridDomain, r: Ridge) -> Optional[Facet]:
    N = domain.N
    dens = np.einsum("k,i,j->kij", r.a, r.nu, r.nu).reshape(-1)
    if N == 2:
        t = np.array([-r.nu[1], r.nu[0]])
        origin = r.c * r.nu
        big = 10.0 * float(np.linalg.norm(domain.hi - domain.lo) + np.linalg.norm(origin) + 1.0)
        f = Facet(origin, t[:, None], [-big], [big], dens, r.nu)
        box = f.clip(domain.lo, domain.hi)
        if box is None:
            return None
        return Facet(origin, t[:, None], box[0], box[1], dens, r.nu)
    axis = int(np.argmax(np.abs(r.nu)))
    if abs(abs(r.nu[axis]) - 1.0) > 1e-12:
        raise NotImplementedError("jump planes in N >= 3 must be axis aligned")
    if not (domain.lo[axis] < r.c < domain.hi[axis]):
        return None
    others = [k for k in range(N) if k != axis]
    return axis_facet(N, axis, r.c, domain.lo[others], domain.hi[others], dens)


def hessian_measure(u: BHField) -> RadonMeasure:
    """``D(grad u) = hess u L^N + sum a (x) nu (x) nu H^{N-1} on the jump planes``."""
    dom = u.domain
    N, d = u.N, u.d
    ac = u.hessian(dom.nodes()).reshape(dom.cells + (d * N * N,))
    pieces = []
    for r in u.jump_ridges():
        if N == 1:
            if dom.lo[0] < r.c < dom.hi[0]:
                pieces.append(Atom([r.c], np.einsum("k,i,j->kij", r.a, r.nu, r.nu).reshape(-1)))
        else:
            f = _ridge_facet(dom, r)
            if f is not None:
                pieces.append(f)
    return RadonMeasure(dom, ac, tuple(pieces), (d, N, N))


# ---------------------------------------------------------------- norms

def _cell_rule(domain: GridDomain, cuts: Optional[Sequence[float]] = None, n: int = GL_CELL):
    """Tensor Gauss rule on the grid cells; in 1D cells are split at ``cuts``."""
    N = domain.N
    per_axis = []
    for k in range(N):
        edges = domain.lo[k] + np.arange(domain.cells[k] + 1) * domain.h[k]
        if N == 1 and cuts:
            edges = np.union1d(edges, [c for c in cuts if domain.lo[0] < c < domain.hi[0]])
        xs, ws = gl_batch(n, edges[:-1], edges[1:])
        per_axis.append((xs.reshape(-1), ws.reshape(-1)))
    X = np.stack(np.meshgrid(*[p[0] for p in per_axis], indexing="ij"), axis=-1).reshape(-1, N)
    W = np.prod(np.stack(np.meshgrid(*[p[1] for p in per_axis], indexing="ij"), axis=-1), axis=-1).reshape(-1)
    return X, W


@dataclass(frozen=True)
class FieldNorms:
    l1: float
    grad_l1: float
    hessian_tv: float

    @property
    def w11(self) -> float:
        return self.l1 + self.grad_l1

    @property
    def bh(self) -> float:
        return self.l1 + self.grad_l1 + self.hessian_tv

    def as_tuple(self):
        return (self.l1, self.grad_l1, self.hessian_tv)


def norms(u: BHField, n: int = GL_CELL) -> FieldNorms:
    """``(int |u|, int |grad u|, |D grad u|(domain))`` by cellwise Gauss quadrature."""
    cuts = [r.c for r in u.ridges] if u.N == 1 else None
    X, W = _cell_rule(u.domain, cuts, n)
    l1 = float(W @ np.linalg.norm(u.value(X), axis=-1))
    g1 = float(W @ np.linalg.norm(u.grad(X).reshape(X.shape[0], -1), axis=-1))
    ac = float(W @ np.linalg.norm(u.hessian(X).reshape(X.shape[0], -1), axis=-1))
    mu = hessian_measure(u)
    sing = sum(p.mass() for p in mu.singular)
    return FieldNorms(l1, g1, ac + sing)


# ---------------------------------------------------------------- smooth fields

@lru_cache(maxsize=None)
def _second_moment(N: int) -> float:
    """``int z_1^2 phi(z) dz`` for the unit bump in ``R^N``."""
    from scipy import integrate
    area = 2.0 * np.pi ** (N / 2.0) / special.gamma(N / 2.0)
    from .quadrature import bump_normalization
    val, _ = integrate.quad(lambda r: r ** (N + 1) * np.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0, epsabs=0.0, epsrel=1e-12)
    return bump_normalization(N) * area * val / N


def marginal_kernel(s, eps: float, N: int) -> np.ndarray:
    """``int_{R^{N-1}} phi_eps(s nu + y) dy`` for any unit ``nu``."""
    s = np.asarray(s, dtype=float)
    if N == 1:
        return bump(s[..., None], eps)
    out = np.zeros_like(s)
    inside = np.abs(s) < eps
    rmax = np.sqrt(np.clip(eps * eps - s[inside] ** 2, 0.0, None))
    r, w = gl_batch(GL_KERNEL, np.zeros_like(rmax), rmax)
    area = 2.0 * np.pi ** ((N - 1) / 2.0) / special.gamma((N - 1) / 2.0)
    pts = np.zeros(r.shape + (N,))
    pts[..., 0] = s[inside][:, None]
    pts[..., 1] = r
    out[inside] = area * np.sum(w * r ** (N - 2) * bump(pts, eps), axis=-1)
    return out


def _ridge_profile(r_val, k: int, order: int, eps: float, N: int) -> np.ndarray:
    """``d^order/dr^order int (r - s)_+^k phibar_eps(s) ds``."""
    r_val = np.asarray(r_val, dtype=float)
    j = k - order
    if j < -1:
        return np.zeros_like(r_val)
    # normalizing by the discrete kernel mass makes affine profiles exact
    Z = _kernel_mass(eps, N)
    if j == -1:
        return math.factorial(k) * marginal_kernel(r_val, eps, N) / Z
    fac = math.factorial(k) / math.factorial(j)
    upper = np.clip(r_val, -eps, eps)
    ss, ww = gl_batch(GL_KERNEL, np.full_like(upper, -eps), upper)
    return fac * np.sum(ww * (r_val[..., None] - ss) ** j * marginal_kernel(ss, eps, N), axis=-1) / Z


@lru_cache(maxsize=256)
def _kernel_mass(eps: float, N: int) -> float:
    ss, ww = gauss_legendre(GL_KERNEL, -eps, eps)
    return float(ww @ marginal_kernel(ss, eps, N))


class MollifiedField:
    """``phi_eps * (x -> u(x + shift))`` evaluated in closed form where possible."""

    def __init__(self, u: BHField, eps: float, shift=None):
        self.u = u
        self.eps = float(eps)
        self.shift = np.zeros(u.N) if shift is None else np.asarray(shift, dtype=float)
        self._base = u.shifted(self.shift) if np.any(self.shift) else u
        self._m2 = _second_moment(u.N) * self.eps ** 2

    @property
    def N(self) -> int:
        return self.u.N

    @property
    def d(self) -> int:
        return self.u.d

    def _poly_part(self, x, order):
        b = self._base
        out = b._poly_eval(x, order)
        # phi is even: cubic polynomials pick up 1/2 eps^2 m2 Laplacian
        lap = BHField.__new__(BHField)
        lap.domain, lap.d = b.domain, b.d
        poly: Dict[tuple, np.ndarray] = {}
        for alpha, v in b.poly.items():
            for i in range(b.N):
                if alpha[i] >= 2:
                    beta = list(alpha)
                    beta[i] -= 2
                    poly[tuple(beta)] = poly.get(tuple(beta), 0.0) + alpha[i] * (alpha[i] - 1) * v
        lap.poly, lap.ridges = poly, ()
        return out + 0.5 * self._m2 * lap._poly_eval(x, order)

    def _ridges(self, x, order):
        x = np.asarray(x, dtype=float)
        N, d = self.N, self.d
        shape = {0: (d,), 1: (d, N), 2: (d, N, N)}[order]
        out = np.zeros(x.shape[:-1] + shape)
        for r in self._base.ridges:
            s = x @ r.nu - r.c
            prof = _ridge_profile(s, r.k, order, self.eps, N)
            if order == 0:
                out += prof[..., None] * r.a
            elif order == 1:
                out += prof[..., None, None] * np.einsum("k,i->ki", r.a, r.nu)
            else:
                out += prof[..., None, None, None] * np.einsum("k,i,j->kij", r.a, r.nu, r.nu)
        return out

    def value(self, x):
        return self._poly_part(x, 0) + self._ridges(x, 0)

    def grad(self, x):
        return self._poly_part(x, 1) + self._ridges(x, 1)

    def hessian(self, x):
        return self._poly_part(x, 2) + self._ridges(x, 2)

    __call__ = value


def translate_mollify(u: BHField, domain, delta: float, eps: float) -> MollifiedField:
    """``phi_eps * T_delta u`` with ``T_delta u(x) = u(x + delta e_N)``.

    ``domain`` is the special Lipschitz domain of ``u`` (anything with a
    Lipschitz constant ``L``); the inward translation keeps the mollifier
    ball inside the domain when ``eps < delta / (1 + L)``.
    """
    L = float(domain.L)
    if not (delta > 0 and eps > 0):
        raise ValueError("delta and eps must be positive")
    if eps >= delta / (1.0 + L):
        raise ValueError("eps must be smaller than delta / (1 + L)")
    shift = np.zeros(u.N)
    shift[-1] = delta
    return MollifiedField(u, eps, shift)


def smooth_norms(v, domain: GridDomain, mask: Optional[Callable] = None, n: int = GL_CELL,
                 reference: Optional[BHField] = None, cuts: Optional[Sequence[float]] = None) -> dict:
    """Quadrature of ``|v|, |grad v|, |hess v|`` (and gaps to ``reference``) over ``domain``."""
    if cuts is None and reference is not None and domain.N == 1:
        cuts = [r.c for r in reference.ridges]
    X, W = _cell_rule(domain, cuts, n)
    if mask is not None:
        W = W * np.asarray(mask(X), dtype=float)
    val, g, Hs = v.value(X), v.grad(X), v.hessian(X)
    out = {
        "l1": float(W @ np.linalg.norm(val, axis=-1)),
        "grad_l1": float(W @ np.linalg.norm(g.reshape(X.shape[0], -1), axis=-1)),
        "hessian_l1": float(W @ np.linalg.norm(Hs.reshape(X.shape[0], -1), axis=-1)),
    }
    if reference is not None:
        out["l1_gap"] = float(W @ np.linalg.norm(val - reference.value(X), axis=-1))
        out["grad_gap"] = float(W @ np.linalg.norm((g - reference.grad(X)).reshape(X.shape[0], -1), axis=-1))
        out["w11_gap"] = out["l1_gap"] + out["grad_gap"]
    return out


@dataclass
class SampledField:
    """Values, gradients and Hessians of a field at the nodes of a grid."""

    domain: GridDomain
    values: np.ndarray
    grad: np.ndarray
    hessian: np.ndarray

    def to_csv(self, path) -> None:
        nodes = self.domain.nodes().reshape(-1, self.domain.N)
        n = nodes.shape[0]
        v = self.values.reshape(n, -1)
        g = self.grad.reshape(n, -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(nodes.shape[1])] + [f"E{j}" for j in range(v.shape[1])]
                       + [f"dE{j}" for j in range(g.shape[1])])
            for row in zip(nodes, v, g):
                w.writerow([repr(float(a)) for part in row for a in part])
