"""Numerical 2-quasiconvex envelopes.

The inner problem ``inf_w mean_Q f(x, H + D^2 w)`` is discretized on a
uniform grid of the unit cube.  ``w`` vanishes on two layers of nodes at
each face, which fixes both the value and the gradient on the boundary,
and discrete Hessians are taken with centered differences at the nodes
``1 .. n-2`` of every axis.  With this choice the mean discrete Hessian of
every admissible ``w`` is exactly zero, so ``w = 0`` is optimal for convex
``f`` and any value returned is an upper bound of the discrete problem.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, sparse

from .integrands import Integrand, RecessionFn, recession_function
from .tensor_core import (LambdaGenerator, as_array, build_lambda_basis, coordinates, dimension,
                          frobenius, from_coordinates, random_sym)

DEFAULT_STARTS = 8
LEVELS_1D = (35, 67, 130, 131)
LEVELS_2D = (8, 12, 16)
FD_STEP = 1e-5
RECESSION_SCHEDULE = 2.0 ** np.arange(13)
REFINE_SLACK = 1e-6


def default_levels(N: int) -> Tuple[int, ...]:
    return LEVELS_1D if N == 1 else LEVELS_2D


# ---------------------------------------------------------------- discrete operator

@dataclass(frozen=True)
class HessianStencil:
    """Sparse map from free nodal values of ``w`` to discrete Hessians.

    Rows are ordered as ``(eval node, k, i, j)``; both off-diagonal slots
    receive the mixed difference.
    """

    N: int
    d: int
    n: int
    matrix: sparse.csr_matrix
    free: np.ndarray  # flat indices of free nodes in the n^N grid

    @property
    def n_eval(self) -> int:
        return (self.n - 2) ** self.N

    @property
    def n_free(self) -> int:
        return self.free.size * self.d

    def apply(self, wfree: np.ndarray) -> np.ndarray:
        return (self.matrix @ wfree).reshape(self.n_eval, self.d, self.N, self.N)

    def adjoint(self, G: np.ndarray) -> np.ndarray:
        return self.matrix.T @ G.reshape(-1)

    def full_values(self, wfree: np.ndarray) -> np.ndarray:
        out = np.zeros((self.d, self.n ** self.N))
        out[:, self.free] = wfree.reshape(self.d, -1)
        return out.reshape((self.d,) + (self.n,) * self.N)


@lru_cache(maxsize=32)
def hessian_stencil(N: int, d: int, n: int) -> HessianStencil:
    if n < 8:
        raise ValueError("need at least 8 nodes per axis")
    if N not in (1, 2, 3):
        raise NotImplementedError("perturbation grids are implemented for N <= 3")
    h = 1.0 / (n - 1)
    m = n - 2
    rows = np.arange(m)
    D2 = sparse.csr_matrix((np.tile([1.0, -2.0, 1.0], m) / h ** 2,
                            (np.repeat(rows, 3), np.stack([rows, rows + 1, rows + 2], 1).reshape(-1))), shape=(m, n))
    D1 = sparse.csr_matrix((np.tile([-1.0, 1.0], m) / (2 * h),
                            (np.repeat(rows, 2), np.stack([rows, rows + 2], 1).reshape(-1))), shape=(m, n))
    R = sparse.csr_matrix((np.ones(m), (rows, rows + 1)), shape=(m, n))

    def kron_axes(ops):
        out = ops[0]
        for op in ops[1:]:
            out = sparse.kron(out, op, format="csr")
        return out

    blocks = {}
    for i in range(N):
        for j in range(i, N):
            ops = [R] * N
            if i == j:
                ops[i] = D2
            else:
                ops[i] = D1
                ops[j] = D1
            blocks[(i, j)] = kron_axes(ops)
    ax = np.arange(2, n - 2)
    grids = np.meshgrid(*[ax] * N, indexing="ij")
    free = np.ravel_multi_index(tuple(g.reshape(-1) for g in grids), (n,) * N)
    # assemble rows (eval, k, i, j) against columns (k, free node)
    E = m ** N
    col_blocks = []
    for k in range(d):
        rowsets = []
        for e_k in range(d):
            for i in range(N):
                for j in range(N):
                    if e_k != k:
                        rowsets.append(sparse.csr_matrix((E, free.size)))
                    else:
                        a, b = min(i, j), max(i, j)
                        rowsets.append(blocks[(a, b)][:, free])
        stacked = sparse.vstack(rowsets, format="csr")  # (d*N*N*E, nfree), ordered (k,i,j,e)
        col_blocks.append(stacked)
    A = sparse.hstack(col_blocks, format="csr")
    # reorder rows from (k,i,j,e) to (e,k,i,j)
    perm = np.arange(d * N * N * E).reshape(d * N * N, E).T.reshape(-1)
    A = A[perm]
    return HessianStencil(N, d, n, A.tocsr(), free)


@dataclass
class PerturbationGrid:
    """Test field ``w`` on the unit cube with ``w`` fixed to zero on two layers at every face."""

    N: int
    d: int
    n: int
    values: np.ndarray  # (d, n, ..., n)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.d,) + (self.n,) * self.N:
            raise ValueError("perturbation values have the wrong shape")
        mask = np.ones((self.n,) * self.N, dtype=bool)
        mask[tuple([slice(2, self.n - 2)] * self.N)] = False
        if np.any(self.values[:, mask] != 0.0):
            raise ValueError("boundary layers of a perturbation grid must be exactly zero")

    @classmethod
    def zeros(cls, N: int, d: int, n: int) -> "PerturbationGrid":
        return cls(N, d, n, np.zeros((d,) + (n,) * N))

    @classmethod
    def from_free(cls, st: HessianStencil, wfree: np.ndarray) -> "PerturbationGrid":
        return cls(st.N, st.d, st.n, st.full_values(wfree))

    def free_values(self) -> np.ndarray:
        st = hessian_stencil(self.N, self.d, self.n)
        return self.values.reshape(self.d, -1)[:, st.free].reshape(-1)

    def hessians(self) -> np.ndarray:
        """Discrete Hessians at the evaluation nodes, shape ``(n_eval, d, N, N)``."""
        st = hessian_stencil(self.N, self.d, self.n)
        return st.apply(self.free_values())

    def mean_hessian(self) -> np.ndarray:
        return self.hessians().mean(axis=0)


def discrete_energy(f: Integrand, x, H, w: PerturbationGrid) -> float:
    H = as_array(H)
    return float(np.mean(f(np.asarray(x, float), H + w.hessians())))


# ---------------------------------------------------------------- laminates

def _group_pattern(m: int, t_plus: float, t_minus: float) -> np.ndarray:
    """Mirror-symmetric two-state sequence on ``m`` nodes with zero mean.

    Mirror symmetry kills the first moment, so the sequence is an exact
    discrete second derivative of a field with zero boundary layers.  The
    innermost group absorbs the remainder of the mean constraint.
    """
    if not (t_plus > 0 > t_minus):
        raise ValueError("laminate amplitudes must have opposite signs")
    groups = [[i, m - 1 - i] for i in range(m // 2)]
    if m % 2:
        groups.append([m // 2])
    p = -t_minus / (t_plus - t_minus)
    G = len(groups)
    states = np.array([np.floor((g + 1) * p) > np.floor(g * p) for g in range(G - 1)], dtype=bool)
    sizes = np.array([len(g) for g in groups], dtype=float)

    def remainder(st):
        s = np.sum(np.where(st, t_plus, t_minus) * sizes[:-1])
        return -s / sizes[-1]

    tc = remainder(states)
    while tc > t_plus and not states.all():
        states[np.flatnonzero(~states)[-1]] = True
        tc = remainder(states)
    while tc < t_minus and states.any():
        states[np.flatnonzero(states)[-1]] = False
        tc = remainder(states)
    seq = np.empty(m)
    for g, idx in enumerate(groups[:-1]):
        seq[idx] = t_plus if states[g] else t_minus
    seq[groups[-1]] = tc
    if m % 2 and (tc > t_plus or tc < t_minus):
        seq = _fix_parity(seq, t_plus, t_minus, tc > t_plus)
    return seq


def _fix_parity(seq: np.ndarray, t_plus: float, t_minus: float, raise_sum: bool) -> np.ndarray:
    """Three state flips at centred positions ``a``, ``b``, ``b - a`` change the sum by one jump.

    The first moment about the centre is unchanged, which mirror-symmetric
    patterns cannot achieve with a single centre node.
    """
    m = seq.size
    z = m // 2
    src, dst = (t_minus, t_plus) if raise_sum else (t_plus, t_minus)
    is_src = np.isclose(seq, src)
    is_dst = np.isclose(seq, dst)
    is_src[z] = is_dst[z] = False
    for a in np.flatnonzero(is_src):
        for b in np.flatnonzero(is_dst):
            c = z + (b - a)
            if 0 <= c < m and c not in (a, b, z) and is_src[c]:
                out = seq.copy()
                out[a], out[b], out[c] = dst, src, dst
                out[z] = 0.0
                out[z] = -np.sum(out)
                return out
    return seq


def laminate_perturbation(N: int, d: int, n: int, direction: LambdaGenerator, t_plus: float,
                          t_minus: float) -> PerturbationGrid:
    """Least-squares field whose Hessian oscillates between ``t_plus xi`` and ``t_minus xi``.

    ``direction.b`` must be a coordinate axis.  For ``N = 1`` the resulting
    Hessian is exactly the two-state (plus one transition node) pattern.
    """
    b = np.asarray(direction.b, dtype=float)
    axis = int(np.argmax(np.abs(b)))
    if abs(abs(b[axis]) - 1.0) > 1e-12:
        raise ValueError("laminate directions must be coordinate axes")
    st = hessian_stencil(N, d, n)
    m = n - 2
    seq = _group_pattern(m, t_plus, t_minus)
    xi = direction.tensor()
    idx = np.stack(np.meshgrid(*[np.arange(m)] * N, indexing="ij"), axis=-1).reshape(-1, N)
    target = seq[idx[:, axis]][:, None, None, None] * xi
    A = st.matrix.toarray()
    w, *_ = np.linalg.lstsq(A, target.reshape(-1), rcond=None)
    return PerturbationGrid.from_free(st, w)


def block_laminate(N: int, d: int, n: int, direction: LambdaGenerator, amplitude: float = 1.0,
                   block: int = 1) -> PerturbationGrid:
    """Hessian pattern ``+ - - +`` repeated in blocks of ``block`` nodes along one axis.

    Each ``+--+`` cell has zero sum and zero first moment, so double summation
    closes with zero boundary layers when ``4 block`` divides ``n - 2``.
    """
    m = n - 2
    if m % (4 * block):
        raise ValueError("n - 2 must be a multiple of 4 * block")
    unit = np.repeat([1.0, -1.0, -1.0, 1.0], block)
    seq = amplitude * np.tile(unit, m // unit.size)
    b = np.asarray(direction.b, dtype=float)
    axis = int(np.argmax(np.abs(b)))
    h = 1.0 / (n - 1)
    # w_{i+1} = 2 w_i - w_{i-1} + h^2 s_i with w_0 = w_1 = 0
    prof = np.zeros(n)
    for i in range(1, n - 1):
        prof[i + 1] = 2 * prof[i] - prof[i - 1] + h * h * seq[i - 1]
    prof[np.abs(prof) < 1e-15] = 0.0
    if abs(prof[-1]) > 1e-12 or abs(prof[-2]) > 1e-12:
        raise AssertionError("block laminate does not close")
    prof[-2:] = 0.0
    if N == 1:
        vals = direction.a[:, None] * prof[None, :]
        return PerturbationGrid(1, d, n, vals)
    raise NotImplementedError("block laminates are one-dimensional profiles")


# ---------------------------------------------------------------- convex hulls

@dataclass(frozen=True)
class ConvexHull1D:
    knots: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=float), self.knots, self.values)

    def supporting_segment(self, t: float) -> Tuple[float, float]:
        """Hull knots bracketing ``t`` (equal when ``t`` is a knot)."""
        i = int(np.searchsorted(self.knots, t))
        if i < self.knots.size and abs(self.knots[i] - t) < 1e-14:
            return float(t), float(t)
        i = min(max(i, 1), self.knots.size - 1)
        return float(self.knots[i - 1]), float(self.knots[i])


def convexify_1d(t, values) -> ConvexHull1D:
    """Lower convex hull of the samples ``(t_i, values_i)`` (monotone chain)."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != v.shape:
        raise ValueError("samples must be two 1D arrays of equal length")
    if t.size < 3:
        raise ValueError("need at least 3 samples")
    dt = np.diff(t)
    if np.any(dt == 0):
        raise ValueError("duplicate abscissae")
    if np.any(dt < 0):
        raise ValueError("samples must be sorted")
    hull: List[int] = []
    for i in range(t.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (t[b] - t[a]) * (v[i] - v[a]) - (v[b] - v[a]) * (t[i] - t[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    idx = np.array(hull)
    return ConvexHull1D(t[idx], v[idx])


def convex_envelope_lp(points, values, H) -> float:
    """Convex envelope of the sample cloud at ``H``: ``min sum l_j f_j`` over convex combinations."""
    P = np.asarray(points, dtype=float).reshape(len(values), -1)
    v = np.asarray(values, dtype=float)
    target = np.asarray(H, dtype=float).reshape(-1)
    A_eq = np.vstack([P.T, np.ones(P.shape[0])])
    b_eq = np.concatenate([target, [1.0]])
    res = optimize.linprog(v, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise ValueError("target lies outside the convex hull of the sample cloud")
    return float(res.fun)


# ---------------------------------------------------------------- envelope solver

@dataclass
class EnvelopeResult:
    value: float
    argmin: PerturbationGrid
    starts_used: int
    trace: Dict[int, float]
    warning: Optional[str] = None
    brackets: Optional[Tuple[float, float]] = None

    @property
    def monotone(self) -> bool:
        vals = [self.trace[k] for k in sorted(self.trace)]
        return all(b <= a + REFINE_SLACK for a, b in zip(vals, vals[1:]))

    @property
    def running_min(self) -> Dict[int, float]:
        out, best = {}, np.inf
        for k in sorted(self.trace):
            best = min(best, self.trace[k])
            out[k] = best
        return out


class _Objective:
    """Mean energy and gradient; remembers the best point evaluated."""

    def __init__(self, f: Integrand, x, H, st: HessianStencil):
        self.f, self.x, self.H, self.st = f, x, H, st
        self.best_val = np.inf
        self.best_w = None
        self.evals = 0

    def _grad_H(self, Hs):
        if self.f.grad is not None:
            return self.f.grad(self.x, Hs)
        N, d = self.st.N, self.st.d
        M = dimension(N, d)
        base = self.f(self.x, Hs)
        c = coordinates(Hs, N, d)
        g = np.zeros(c.shape)
        for j in range(M):
            cp = c.copy()
            cp[:, j] += FD_STEP
            g[:, j] = (self.f(self.x, from_coordinates(cp, N, d)) - base) / FD_STEP
        # the sqrt(2) coordinate weight turns d/dc into the per-slot derivative
        return from_coordinates(g, N, d)

    def __call__(self, w):
        Hs = self.H + self.st.apply(w)
        vals = self.f(self.x, Hs)
        val = float(np.mean(vals))
        self.evals += 1
        if np.isfinite(val) and val < self.best_val:
            self.best_val = val
            self.best_w = w.copy()
        G = self._grad_H(Hs) / self.st.n_eval
        return val, self.st.adjoint(G)


def _line_hull_amplitudes(f: Integrand, x, H, xi: np.ndarray, radius: float) -> Optional[Tuple[float, float]]:
    """Endpoints of the supporting segment at 0 of the convex hull of ``t -> f(H + t xi)``."""
    t = np.linspace(-radius, radius, 801)
    t = np.union1d(t, [0.0])
    vals = f(x, as_array(H) + t[:, None, None, None] * xi)
    hull = convexify_1d(t, vals)
    lo, hi = hull.supporting_segment(0.0)
    if lo == hi or not (hi > 0 > lo):
        return None
    if float(f(x, H)) - float(hull(0.0)) <= 1e-12:
        return None

    def g(s):
        return float(f(x, as_array(H) + s * xi))

    # polish the common tangent between grid points
    dt = t[1] - t[0]
    for _ in range(3):
        slope = (g(hi) - g(lo)) / (hi - lo)
        hi = optimize.minimize_scalar(lambda s: g(s) - slope * s, bounds=(max(hi - 2 * dt, 0.5 * hi), hi + 2 * dt),
                                      method="bounded", options={"xatol": 1e-13}).x
        lo = optimize.minimize_scalar(lambda s: g(s) - slope * s, bounds=(lo - 2 * dt, min(lo + 2 * dt, 0.5 * lo)),
                                      method="bounded", options={"xatol": 1e-13}).x
    return float(hi), float(lo)


def _starts(f, x, H, st, starts, rng):
    N, d, n = st.N, st.d, st.n
    out = [np.zeros(st.n_free)]
    basis = build_lambda_basis(N, d)
    scale = 1.0 + float(frobenius(H))
    for g in basis.generators:
        if np.count_nonzero(g.b) != 1:
            continue
        amps = _line_hull_amplitudes(f, x, H, g.tensor(), 4.0 * scale)
        if amps is None:
            continue
        out.append(laminate_perturbation(N, d, n, g, *amps).free_values())
    h = 1.0 / (n - 1)
    while len(out) < starts:
        w = rng.standard_normal(st.n_free) * scale * h * h
        out.append(w)
    return out[:max(starts, 1)] if len(out) > starts else out


def _solve_level(f: Integrand, x, H, n: int, starts: int, rng, maxiter: int):
    N, d = H.shape[1], H.shape[0]
    st = hessian_stencil(N, d, n)
    obj = _Objective(f, x, H, st)
    failures = 0
    used = 0
    for w0 in _starts(f, x, H, st, starts, rng):
        used += 1
        v0, _ = obj(w0)
        if obj.best_val <= 0.0:
            break
        step = 1.0
        while True:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = optimize.minimize(obj, step * w0, jac=True, method="L-BFGS-B",
                                        options={"maxiter": maxiter, "gtol": 1e-10, "ftol": 1e-13})
            if np.isfinite(res.fun) and res.fun <= v0 + 1e-12:
                break
            failures += 1
            step *= 0.5
            if step < 1e-3:
                break
        if obj.best_val <= 0.0:
            break
    return obj.best_val, PerturbationGrid.from_free(st, obj.best_w), used, failures


def quasiconvex_envelope(f: Integrand, x, H, levels: Optional[Sequence[int]] = None,
                         starts: int = DEFAULT_STARTS, seed: int = 0, use_convexity: bool = True,
                         bracket: bool = False, maxiter: int = 300) -> EnvelopeResult:
    """Upper bound of ``Q_2 f(x, H)`` from multi-start descent on perturbation grids.

    Parameters
    ----------
    levels : sequence of int, optional
        Nodes per axis for the refinement trace (default 35, 67, 130, 131 for
        ``N = 1`` and 8, 12, 16 otherwise).  The value is the minimum over
        all levels.
    use_convexity : bool
        Skip the optimization when ``f`` is flagged convex (Jensen gives
        ``Q_2 f = f``).
    bracket : bool
        Also compute a lower bracket (convex envelope of samples) for
        ``M = 1``.
    """
    H = as_array(H)
    x = np.asarray(x, dtype=float)
    d, N = H.shape[0], H.shape[1]
    fH = float(f(x, H))
    if not np.isfinite(fH):
        raise ValueError("integrand is not finite at H")
    if use_convexity and f.convex:
        return EnvelopeResult(fH, PerturbationGrid.zeros(N, d, 8), 0, {}, None, (fH, fH) if bracket else None)
    levels = default_levels(N) if levels is None else tuple(levels)
    if min(levels) < 8:
        raise ValueError("n_w must be at least 8")
    rng = np.random.default_rng(seed)
    trace, best, best_w, used, fails = {}, fH, None, 0, 0
    for n in levels:
        val, w, u, fl = _solve_level(f, x, H, n, starts, rng, maxiter)
        trace[n] = val
        used += u
        fails += fl
        if val < best or best_w is None:
            best, best_w = min(val, best), w
    warning = None
    if fails >= starts * len(levels):
        warning = "descent failed from every start; best value so far returned"
    best = min(best, fH)
    brackets = None
    if bracket:
        brackets = (envelope_lower_bracket(f, x, H), best)
    return EnvelopeResult(float(best), best_w, used, trace, warning, brackets)


def envelope_lower_bracket(f: Integrand, x, H, n_samples: int = 801) -> float:
    """Convex envelope of sampled values (only for ``M = 1``, where it equals ``Q_2 f``)."""
    H = as_array(H)
    if H.size != 1:
        raise NotImplementedError("lower brackets are automatic only for N = d = 1")
    h = float(H.reshape(-1)[0])
    R = 4.0 * max(1.0, abs(h))
    t = np.union1d(np.linspace(-R, R, n_samples), [h])
    vals = f(x, t[:, None, None, None])
    return float(convexify_1d(t, vals)(h))


# ---------------------------------------------------------------- diagnostics

@dataclass
class QuasiconvexityReport:
    margins: np.ndarray
    min_margin: float
    passed: bool

    def __bool__(self):
        return self.passed


def check_2quasiconvexity(f: Callable, x, H_samples, w_samples: Sequence[PerturbationGrid],
                          tol: float = 1e-8) -> QuasiconvexityReport:
    """Margins ``mean f(x, H + D^2 w) - f(x, H)`` over all sample pairs."""
    x = np.asarray(x, dtype=float)
    margins = np.zeros((len(H_samples), len(w_samples)))
    hess = [w.hessians() for w in w_samples]
    for i, H in enumerate(H_samples):
        H = as_array(H)
        base = float(f(x, H))
        for j, D in enumerate(hess):
            margins[i, j] = float(np.mean(f(x, H + D))) - base
    mm = float(margins.min()) if margins.size else 0.0
    return QuasiconvexityReport(margins, mm, mm >= -tol)


def envelope_modulus_check(f: Integrand, x, y, H_samples, envelope_tol: float = 0.0, **kw) -> float:
    """Worst ratio ``|Q f(x,H) - Q f(y,H)| / bound``; raises if a ratio exceeds one."""
    if f.coercivity_c is None:
        raise ValueError("the modulus check needs a coercivity constant")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dist = float(np.linalg.norm(x - y))
    omega = 0.0 if f.modulus is None else float(f.modulus(dist))
    worst = 0.0
    for H in H_samples:
        H = as_array(H)
        qx = quasiconvex_envelope(f, x, H, **kw).value
        qy = qx if dist == 0 else quasiconvex_envelope(f, y, H, **kw).value
        bound = (2.0 * f.growth_C / f.coercivity_c) * omega * (1.0 + float(frobenius(H))) + 2.0 * envelope_tol
        gap = abs(qx - qy)
        if bound == 0.0:
            ratio = 0.0 if gap <= 1e-14 else np.inf
        else:
            ratio = gap / bound
        worst = max(worst, ratio)
    if worst > 1.0:
        raise AssertionError(f"envelope modulus bound violated (ratio {worst:.4g})")
    return worst


def envelope_recession(f: Integrand, x, H, t_schedule=None, tail: int = 5, **kw) -> float:
    """``max_{t in tail} Q_2 f(x, t H^)/t * |H|`` (1-homogeneous by construction)."""
    H = as_array(H)
    nrm = float(frobenius(H))
    if nrm == 0:
        raise ValueError("recession direction must be nonzero")
    t = RECESSION_SCHEDULE if t_schedule is None else np.asarray(t_schedule, dtype=float)
    U = H / nrm
    vals = [quasiconvex_envelope(f, x, ti * U, **kw).value / ti for ti in t[-tail:]]
    return nrm * float(max(vals))


# ---------------------------------------------------------------- backends

@dataclass
class EnvelopeTable1D:
    """Tabulated ``Q_2 f(x, .)`` for ``N = d = 1`` with linear interpolation."""

    h_grid: np.ndarray
    values: np.ndarray
    lower: np.ndarray
    f_values: np.ndarray
    x: np.ndarray

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        if np.any(h < self.h_grid[0] - 1e-12) or np.any(h > self.h_grid[-1] + 1e-12):
            raise ValueError("Hessian outside the tabulated range")
        return np.interp(h, self.h_grid, self.values)

    def as_integrand(self, growth_C: float) -> Integrand:
        tab = self

        def f(x, H):
            return tab(np.asarray(H)[..., 0, 0, 0])
        return Integrand(f, growth_C, name="tabulated-envelope")

    def rows(self):
        for h, fv, lo, up in zip(self.h_grid, self.f_values, self.lower, self.values):
            yield list(self.x) + [h, fv, lo, up]


def tabulate_envelope_1d(f: Integrand, x, h_grid, **kw) -> EnvelopeTable1D:
    x = np.asarray(x, dtype=float)
    h_grid = np.asarray(h_grid, dtype=float)
    if h_grid.size == 0:
        raise ValueError("empty H grid")
    vals, lower, fv = [], [], []
    for h in h_grid:
        H = np.full((1, 1, 1), h)
        vals.append(quasiconvex_envelope(f, x, H, **kw).value)
        lower.append(envelope_lower_bracket(f, x, H))
        fv.append(float(f(x, H)))
    return EnvelopeTable1D(h_grid, np.array(vals), np.array(lower), np.array(fv), x)


class EnvelopeBackend:
    """Evaluates ``Q_2 f`` and ``(Q_2 f)^inf`` with caching.

    Convex integrands are passed through.  Otherwise values are cached per
    distinct ``(x, H)``; for ``N = d = 1`` and an observed Hessian range a
    padded interpolation table can be built with :meth:`prepare_table`.
    """

    def __init__(self, f: Integrand, levels=None, starts: int = DEFAULT_STARTS, seed: int = 0,
                 recession_schedule=None, x_independent: Optional[bool] = None):
        self.f = f
        self.levels = levels
        self.starts = starts
        self.seed = seed
        self.recession_schedule = recession_schedule
        self.x_independent = f.modulus is None if x_independent is None else x_independent
        self.cache: Dict[tuple, float] = {}
        self.table: Optional[EnvelopeTable1D] = None
        self.warnings: List[str] = []

    def _key(self, x, H):
        xk = () if self.x_independent else tuple(np.round(np.asarray(x, float), 14))
        return xk + tuple(np.round(as_array(H).reshape(-1), 14))

    def value(self, x, H) -> float:
        if self.f.convex:
            return float(self.f(np.asarray(x, float), as_array(H)))
        if self.table is not None and as_array(H).size == 1:
            h = float(as_array(H).reshape(-1)[0])
            if self.table.h_grid[0] <= h <= self.table.h_grid[-1]:
                return float(self.table(h))
        return self._direct(x, H)

    def _direct(self, x, H) -> float:
        key = self._key(x, H)
        if key not in self.cache:
            res = quasiconvex_envelope(self.f, x, H, levels=self.levels, starts=self.starts, seed=self.seed)
            if res.warning:
                self.warnings.append(res.warning)
            self.cache[key] = res.value
        return self.cache[key]

    def values(self, x, Hs) -> np.ndarray:
        Hs = as_array(Hs)
        if self.f.convex:
            return np.asarray(self.f(np.asarray(x, float), Hs), dtype=float)
        X = np.broadcast_to(np.asarray(x, float), Hs.shape[:-3] + (Hs.shape[-1],))
        out = np.empty(Hs.shape[:-3])
        for idx in np.ndindex(*out.shape):
            out[idx] = self.value(X[idx], Hs[idx])
        return out

    def prepare_table(self, x, h_min: float, h_max: float, points: int = 41, grid=None) -> EnvelopeTable1D:
        """Table on ``[h_min, h_max]`` padded by 20%; an explicit ``grid`` is padded the same way."""
        span = max(h_max - h_min, 1e-3)
        lo, hi = h_min - 0.2 * span, h_max + 0.2 * span
        if grid is None:
            grid = np.linspace(lo, hi, points)
        else:
            grid = np.unique(np.concatenate([[lo, hi], np.asarray(grid, float)]))
            grid = grid[(grid >= lo) & (grid <= hi)]
        # nodes go through the cache so widening a table reuses earlier nodes
        x = np.asarray(x, dtype=float)
        Hs = [np.full((1, 1, 1), h) for h in grid]
        vals = np.array([self._direct(x, H) for H in Hs])
        lower = np.array([envelope_lower_bracket(self.f, x, H) for H in Hs])
        fv = np.array([float(self.f(x, H)) for H in Hs])
        self.table = EnvelopeTable1D(grid, vals, lower, fv, x)
        return self.table

    def recession(self, x, H) -> float:
        H = as_array(H)
        if float(frobenius(H)) == 0.0:
            return 0.0
        if self.f.convex:
            return float(recession_function(self.f)(np.asarray(x, float), H))
        return envelope_recession(self.f, x, H, self.recession_schedule, levels=self.levels,
                                  starts=self.starts, seed=self.seed)
