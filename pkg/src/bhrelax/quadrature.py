"""Quadrature rules and the smooth bump used as mollifier profile."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import integrate, special


@lru_cache(maxsize=None)
def _gl(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0):
    """Nodes and weights of the ``n``-point Gauss-Legendre rule on ``[a, b]``."""
    x, w = _gl(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def gl_batch(n: int, a, b):
    """Gauss-Legendre rules on many intervals at once.

    ``a`` and ``b`` have shape ``(P,)``; returns nodes and weights of shape
    ``(P, n)``.  Empty intervals get zero weights.
    """
    x, w = _gl(n)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * np.maximum(b - a, 0.0)
    return a + half * (x + 1.0), half * w


def _bump_raw(s):
    """``exp(-1/(1-s))`` for ``s = |x|^2 < 1``, zero otherwise."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside]))
    return out


@lru_cache(maxsize=None)
def bump_normalization(N: int) -> float:
    """``Z_N`` such that ``Z_N exp(-1/(1-|x|^2))`` integrates to one on R^N."""
    area = 2.0 * np.pi ** (N / 2.0) / special.gamma(N / 2.0)
    val, _ = integrate.quad(lambda r: r ** (N - 1) * np.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0,
                            epsabs=0.0, epsrel=1e-12, limit=200)
    return 1.0 / (area * val)


def bump(x, eps: float = 1.0):
    """Standard mollifier ``phi_eps(x) = eps^-N phi(x / eps)``; ``x`` has shape ``(..., N)``."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-1]
    s = np.sum(x * x, axis=-1) / (eps * eps)
    return bump_normalization(N) * _bump_raw(s) / eps ** N


def bump_grad(x, eps: float = 1.0):
    x = np.asarray(x, dtype=float)
    y = x / eps
    N = x.shape[-1]
    s = np.sum(y * y, axis=-1)
    q = np.where(s < 1.0, 1.0 - s, 1.0)
    phi = bump_normalization(N) * _bump_raw(s)
    return (phi * (-2.0) / q ** 2)[..., None] * y / eps ** (N + 1)


def bump_hessian(x, eps: float = 1.0):
    x = np.asarray(x, dtype=float)
    y = x / eps
    N = x.shape[-1]
    s = np.sum(y * y, axis=-1)
    q = np.where(s < 1.0, 1.0 - s, 1.0)
    phi = bump_normalization(N) * _bump_raw(s)
    yy = np.einsum("...i,...j->...ij", y, y)
    eye = np.eye(N)
    H = (4.0 / q ** 4 - 8.0 / q ** 3)[..., None, None] * yy - (2.0 / q ** 2)[..., None, None] * eye
    return phi[..., None, None] * H / eps ** (N + 2)


@lru_cache(maxsize=None)
def ball_rule(N: int, n_radial: int = 12, n_angular: int = 12):
    """Quadrature on the unit ball of R^N (N = 1 or 2) with weights summing to |B|.

    N = 1 uses a 16-point Gauss rule on [-1, 1]; N = 2 a product rule of
    Gauss nodes in the radius and equispaced angles.
    """
    if N == 1:
        x, w = gauss_legendre(16, -1.0, 1.0)
        return x[:, None].copy(), w.copy()
    if N == 2:
        r, wr = gauss_legendre(n_radial, 0.0, 1.0)
        th = (np.arange(n_angular) + 0.5) * 2.0 * np.pi / n_angular
        wt = np.full(n_angular, 2.0 * np.pi / n_angular)
        R, T = np.meshgrid(r, th, indexing="ij")
        W = np.outer(wr * r, wt)
        pts = np.stack([R * np.cos(T), R * np.sin(T)], axis=-1).reshape(-1, 2)
        return pts, W.reshape(-1)
    raise NotImplementedError("ball rules are implemented for N = 1, 2")


@lru_cache(maxsize=None)
def mollifier_ball_rule(N: int, n_radial: int = 12, n_angular: int = 12):
    """Nodes ``z`` and weights ``w`` with ``sum w g(z) ~ int g(z) phi(z) dz``; ``sum w = 1``."""
    pts, w = ball_rule(N, n_radial, n_angular)
    w = w * bump(pts)
    w = w / w.sum()
    return pts, w
