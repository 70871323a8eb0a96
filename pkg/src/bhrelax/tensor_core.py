"""Tensors of the space X(N, d, 2) and the cone of Lambda directions.

An element of X(N, d, 2) is stored as a dense ``(d, N, N)`` array that is
symmetric in its last two axes, i.e. a vector-valued Hessian.  The cone
Lambda(N, d, 2) consists of the tensors ``a (x) b (x) b``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SYM_ATOL = 1e-12
BASIS_SEED = 0
BASIS_SAMPLES = 1000


def symmetrize(entries) -> np.ndarray:
    entries = np.asarray(entries, dtype=float)
    return 0.5 * (entries + np.swapaxes(entries, -1, -2))


def frobenius(H) -> np.ndarray:
    """Frobenius norm over the last three axes of ``H``."""
    H = np.asarray(H, dtype=float)
    return np.sqrt(np.sum(H * H, axis=(-3, -2, -1)))


@dataclass(frozen=True)
class SymTensor:
    """A ``d x N x N`` array symmetric in the last two indices."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.ndim != 3 or e.shape[1] != e.shape[2]:
            raise ValueError(f"expected shape (d, N, N), got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("tensor entries must be finite")
        scale = max(1.0, float(np.max(np.abs(e))))
        if np.max(np.abs(e - np.swapaxes(e, 1, 2))) > SYM_ATOL * scale:
            raise ValueError("entries are not symmetric in the last two indices")
        e = symmetrize(e)
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @classmethod
    def from_any(cls, entries) -> "SymTensor":
        """Build from an arbitrary array by symmetrizing it first."""
        return cls(symmetrize(entries))

    @classmethod
    def zeros(cls, d: int, N: int) -> "SymTensor":
        return cls(np.zeros((d, N, N)))

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    def norm(self) -> float:
        return float(frobenius(self.entries))

    def __add__(self, other):
        return SymTensor(self.entries + as_array(other))

    def __sub__(self, other):
        return SymTensor(self.entries - as_array(other))

    def __mul__(self, s: float):
        return SymTensor(self.entries * float(s))

    __rmul__ = __mul__

    def __neg__(self):
        return SymTensor(-self.entries)


def as_array(H) -> np.ndarray:
    if isinstance(H, SymTensor):
        return H.entries
    return np.asarray(H, dtype=float)


@dataclass(frozen=True)
class LambdaGenerator:
    """Generator ``a (x) b (x) b`` of the Lambda cone."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))

    def tensor(self) -> np.ndarray:
        return np.einsum("k,i,j->kij", self.a, self.b, self.b)

    def sym(self) -> SymTensor:
        return SymTensor(self.tensor())

    def norm(self) -> float:
        return float(np.linalg.norm(self.a) * np.linalg.norm(self.b) ** 2)


def dimension(N: int, d: int) -> int:
    """Dimension of X(N, d, 2): ``d * N * (N + 1) / 2``."""
    return d * N * (N + 1) // 2


def _index_triples(N: int, d: int):
    return [(k, i, j) for k in range(d) for i in range(N) for j in range(i, N)]


def coordinates(H, N: int, d: int) -> np.ndarray:
    """Orthonormal coordinates of ``H`` (off-diagonal entries weighted by sqrt 2).

    Accepts a batch ``(..., d, N, N)`` and returns ``(..., M)``.
    """
    H = as_array(H)
    cols = []
    for k, i, j in _index_triples(N, d):
        w = 1.0 if i == j else np.sqrt(2.0)
        cols.append(w * H[..., k, i, j])
    return np.stack(cols, axis=-1)


def from_coordinates(c, N: int, d: int) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    H = np.zeros(c.shape[:-1] + (d, N, N))
    for m, (k, i, j) in enumerate(_index_triples(N, d)):
        if i == j:
            H[..., k, i, i] = c[..., m]
        else:
            v = c[..., m] / np.sqrt(2.0)
            H[..., k, i, j] = v
            H[..., k, j, i] = v
    return H


def random_sym(rng: np.random.Generator, d: int, N: int, size: Optional[int] = None) -> np.ndarray:
    shape = (d, N, N) if size is None else (size, d, N, N)
    return symmetrize(rng.standard_normal(shape))


@dataclass(frozen=True)
class LambdaBasis:
    """Basis of X(N, d, 2) made of unit-norm Lambda tensors.

    ``coeff_matrix`` maps orthonormal coordinates (see :func:`coordinates`)
    to basis coefficients.  ``equiv_constant`` is the sampled norm
    equivalence constant; it is a lower bound on the optimal one, which is
    available as ``equiv_constant_exact``.
    """

    N: int
    d: int
    generators: tuple
    coeff_matrix: np.ndarray
    equiv_constant: float
    equiv_constant_exact: float
    sample_sums: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return len(self.generators)

    def tensors(self) -> np.ndarray:
        return np.stack([g.tensor() for g in self.generators])

    def reconstruct(self, coeffs) -> np.ndarray:
        return np.tensordot(np.asarray(coeffs, dtype=float), self.tensors(), axes=(-1, 0))


def build_lambda_basis(N: int, d: int, samples: int = BASIS_SAMPLES, seed: int = BASIS_SEED) -> LambdaBasis:
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    gens = []
    for k, i, j in _index_triples(N, d):
        a = np.zeros(d)
        a[k] = 1.0
        b = np.zeros(N)
        b[i] = 1.0
        if i != j:
            b[j] = 1.0
            b /= np.linalg.norm(b)
        gens.append(LambdaGenerator(a, b))
    M = len(gens)
    if M != dimension(N, d):
        raise AssertionError("generator count does not match dim X(N,d,2)")
    A = np.stack([coordinates(g.tensor(), N, d) for g in gens], axis=1)
    if np.linalg.matrix_rank(A) != M:
        raise AssertionError("Lambda generators do not span X(N,d,2)")
    C = np.linalg.inv(A)

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((samples, M))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    sums = np.abs(X @ C.T).sum(axis=1)
    c_sampled = float(max(sums.max(), 1.0 / sums.min()))

    # max of ||C x||_1 over the unit sphere is attained at a sign vector of C^T
    if M <= 16:
        best = 0.0
        for signs in itertools.product((-1.0, 1.0), repeat=M):
            best = max(best, float(np.linalg.norm(C.T @ np.array(signs))))
        c_exact = max(best, 1.0)
    else:
        c_exact = float(np.sqrt(M) * np.linalg.norm(C, 2))
    return LambdaBasis(N, d, tuple(gens), C, c_sampled, c_exact, sums)


def decompose(H, basis: LambdaBasis) -> np.ndarray:
    """Coefficients ``a`` with ``H = sum_i a_i xi_i``."""
    H = as_array(H)
    if H.shape[-3:] != (basis.d, basis.N, basis.N):
        raise ValueError(f"tensor shape {H.shape[-3:]} does not match basis ({basis.d}, {basis.N}, {basis.N})")
    return coordinates(H, basis.N, basis.d) @ basis.coeff_matrix.T


def is_lambda_direction(H, tol: float = 1e-10):
    """Return ``(a, b)`` with ``|H - a(x)b(x)b| <= tol |H|``, or ``None``.

    ``b`` is a unit vector; its sign is arbitrary.
    """
    H = as_array(H)
    d, N = H.shape[0], H.shape[1]
    nrm = float(frobenius(H))
    if nrm <= 1e-14:
        b = np.zeros(N)
        b[0] = 1.0
        return np.zeros(d), b
    slice_norms = np.sqrt(np.sum(H * H, axis=(1, 2)))
    k = int(np.argmax(slice_norms))
    w, V = np.linalg.eigh(H[k])
    b = V[:, int(np.argmax(np.abs(w)))]
    a = np.einsum("kij,i,j->k", H, b, b)
    resid = float(frobenius(H - np.einsum("k,i,j->kij", a, b, b)))
    if resid <= max(tol * nrm, 1e-14):
        return a, b
    return None


@dataclass
class ConvexityReport:
    passed: bool
    worst_violation: float
    worst_case: Optional[tuple]
    checked: int
    nonfinite: list

    def __bool__(self):
        return self.passed


def check_lambda_convexity(
    f: Callable,
    base_samples: Sequence,
    directions: Sequence[LambdaGenerator],
    t_grid: Sequence[float],
    tol: float = 1e-9,
) -> ConvexityReport:
    """Midpoint-type convexity test of ``f`` along Lambda lines.

    For each base ``H``, direction ``xi`` and triple ``t1 < t2 < t3`` the
    value ``f(H + t2 xi)`` is compared with the chord through the outer
    points.  A positive violation means convexity fails on the samples.
    """
    ts = np.sort(np.asarray(t_grid, dtype=float))
    worst = -np.inf
    worst_case = None
    nonfinite = []
    checked = 0
    for bi, H in enumerate(base_samples):
        H = as_array(H)
        for di, g in enumerate(directions):
            xi = g.tensor()
            vals = np.array([float(f(H + t * xi)) for t in ts])
            bad = ~np.isfinite(vals)
            if bad.any():
                nonfinite.extend((bi, di, float(ts[i])) for i in np.flatnonzero(bad))
                continue
            for i1, i2, i3 in itertools.combinations(range(len(ts)), 3):
                t1, t2, t3 = ts[i1], ts[i2], ts[i3]
                lam = (t2 - t1) / (t3 - t1)
                chord = (1 - lam) * vals[i1] + lam * vals[i3]
                v = vals[i2] - chord
                checked += 1
                if v > worst:
                    worst = v
                    worst_case = (bi, di, (t1, t2, t3))
    if checked == 0:
        worst = 0.0
    passed = worst <= tol and not nonfinite
    return ConvexityReport(passed, float(worst), worst_case, checked, nonfinite)


@dataclass
class LipschitzEstimate:
    estimate: float
    bound: float
    pairs: int

    @property
    def within_bound(self) -> bool:
        return self.estimate <= self.bound


def estimate_lipschitz(f: Callable, C: float, basis: LambdaBasis, samples: Iterable) -> LipschitzEstimate:
    """Pairwise difference-quotient estimate against the bound ``3 c M C``."""
    Hs = [as_array(H) for H in samples]
    vals = []
    for H in Hs:
        v = float(f(H))
        if abs(v) > C * (1.0 + float(frobenius(H))) * (1 + 1e-12):
            raise ValueError("sample violates the linear growth bound")
        vals.append(v)
    best = 0.0
    pairs = 0
    for i in range(len(Hs)):
        for j in range(i + 1, len(Hs)):
            dist = float(frobenius(Hs[i] - Hs[j]))
            if dist <= 1e-14:
                continue
            pairs += 1
            best = max(best, abs(vals[i] - vals[j]) / dist)
    bound = 3.0 * basis.equiv_constant * basis.M * C
    est = LipschitzEstimate(best, bound, pairs)
    if not est.within_bound:
        raise AssertionError(f"Lipschitz estimate {best:.6g} exceeds bound {bound:.6g}")
    return est
