"""Vector Radon measures on boxes.

A :class:`RadonMeasure` is an absolutely continuous density sampled at the
cell centres of a :class:`GridDomain` plus a list of singular pieces:
weighted atoms and flat codimension-one facets carrying a surface density.
All quadratures of the absolutely continuous part use the midpoint rule on
the grid; kernel integrals over facets use Gauss-Legendre rules.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy import signal

from .quadrature import bump, gauss_legendre, gl_batch

GL_POINTS = 16
UNIT_TOL = 1e-12


# ---------------------------------------------------------------- domains

@dataclass(frozen=True)
class GridDomain:
    lo: np.ndarray
    hi: np.ndarray
    cells: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        if lo.shape != hi.shape or len(cells) != lo.size:
            raise ValueError("lo, hi and cells must have the same length")
        if np.any(lo >= hi):
            raise ValueError("need lo < hi componentwise")
        if any(c < 1 for c in cells):
            raise ValueError("cells_per_axis must be positive")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def box(cls, lo, hi, cells) -> "GridDomain":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        cells = np.broadcast_to(np.atleast_1d(cells), lo.shape)
        return cls(lo, hi, tuple(cells))

    @property
    def N(self) -> int:
        return self.lo.size

    @property
    def h(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def axis_centers(self, k: int) -> np.ndarray:
        return self.lo[k] + (np.arange(self.cells[k]) + 0.5) * self.h[k]

    def nodes(self) -> np.ndarray:
        """Cell centres, shape ``(*cells, N)``."""
        axes = [self.axis_centers(k) for k in range(self.N)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def contains_box(self, lo, hi, slack: float = 1e-12) -> bool:
        lo = np.atleast_1d(lo)
        hi = np.atleast_1d(hi)
        return bool(np.all(lo >= self.lo - slack) and np.all(hi <= self.hi + slack))

    def overlap_weights(self, lo, hi) -> np.ndarray:
        """Fraction of each cell lying inside the box ``[lo, hi]``."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        w = np.ones(self.cells)
        for k in range(self.N):
            left = self.lo[k] + np.arange(self.cells[k]) * self.h[k]
            right = left + self.h[k]
            frac = np.clip(np.minimum(right, hi[k]) - np.maximum(left, lo[k]), 0.0, None) / self.h[k]
            shape = [1] * self.N
            shape[k] = -1
            w = w * frac.reshape(shape)
        return w

    def distance_to_boundary(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.min(np.minimum(p - self.lo, self.hi - p), axis=-1)

    def locate(self, points) -> np.ndarray:
        """Index of the cell containing each point (clamped to the grid)."""
        p = np.asarray(points, dtype=float)
        idx = np.floor((p - self.lo) / self.h + 1e-12).astype(int)
        return np.clip(idx, 0, np.array(self.cells) - 1)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "cells": list(self.cells)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridDomain":
        return cls(np.array(d["lo"], float), np.array(d["hi"], float), tuple(d["cells"]))


Region = Optional[tuple]


def _region(domain: GridDomain, region: Region):
    if region is None:
        return domain.lo.copy(), domain.hi.copy()
    lo = np.atleast_1d(np.asarray(region[0], dtype=float))
    hi = np.atleast_1d(np.asarray(region[1], dtype=float))
    if not domain.contains_box(lo, hi) or np.any(lo > hi):
        raise ValueError("region is not contained in the domain")
    return lo, hi


# ---------------------------------------------------------------- singular pieces

@dataclass(frozen=True)
class Atom:
    """Point mass ``weight * delta_location``."""

    location: np.ndarray
    weight: np.ndarray
    kind = "atom"

    def __post_init__(self):
        object.__setattr__(self, "location", np.atleast_1d(np.asarray(self.location, dtype=float)))
        object.__setattr__(self, "weight", np.atleast_1d(np.asarray(self.weight, dtype=float)))
        if not (np.all(np.isfinite(self.location)) and np.all(np.isfinite(self.weight))):
            raise ValueError("atom data must be finite")

    def mass(self) -> float:
        return float(np.linalg.norm(self.weight))

    def mass_in(self, lo, hi) -> float:
        inside = np.all(self.location >= lo - 1e-14) and np.all(self.location <= hi + 1e-14)
        return self.mass() if inside else 0.0

    def to_dict(self) -> dict:
        return {"kind": "atom", "location": self.location.tolist(), "weight": self.weight.tolist()}


@dataclass(frozen=True)
class Facet:
    """Flat codimension-one piece ``{origin + T s : plo <= s <= phi}``.

    ``tangents`` is ``N x (N-1)`` with orthonormal columns; ``density`` holds
    piecewise-constant surface densities on a uniform grid of the parameter
    box, shape ``(*param_cells, m)``.
    """

    origin: np.ndarray
    tangents: np.ndarray
    plo: np.ndarray
    phi: np.ndarray
    density: np.ndarray
    normal: np.ndarray = None
    kind = "facet"

    def __post_init__(self):
        o = np.atleast_1d(np.asarray(self.origin, dtype=float))
        T = np.asarray(self.tangents, dtype=float).reshape(o.size, -1)
        plo = np.atleast_1d(np.asarray(self.plo, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        K = o.size - 1
        if K < 1 or T.shape[1] != K or plo.size != K or phi.size != K:
            raise ValueError("facet needs N-1 tangents and parameter bounds (N >= 2)")
        if np.max(np.abs(T.T @ T - np.eye(K))) > 1e-10:
            raise ValueError("facet tangents must be orthonormal")
        if np.any(plo >= phi):
            raise ValueError("empty facet parameter box")
        dens = np.asarray(self.density, dtype=float)
        if dens.ndim == 1:
            dens = dens.reshape((1,) * K + (-1,))
        if dens.ndim != K + 1:
            raise ValueError("facet density must have shape (*param_cells, m)")
        if self.normal is None:
            u, s, vt = np.linalg.svd(T.T)
            nu = vt[-1]
        else:
            nu = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(nu) - 1.0) > UNIT_TOL or np.max(np.abs(T.T @ nu)) > 1e-10:
            raise ValueError("facet normal must be a unit vector orthogonal to the tangents")
        for name, val in (("origin", o), ("tangents", T), ("plo", plo), ("phi", phi), ("density", dens), ("normal", nu)):
            object.__setattr__(self, name, val)

    @property
    def K(self) -> int:
        return self.tangents.shape[1]

    @property
    def m(self) -> int:
        return self.density.shape[-1]

    @property
    def param_cells(self) -> tuple:
        return self.density.shape[:-1]

    def cell_size(self) -> np.ndarray:
        return (self.phi - self.plo) / np.array(self.param_cells)

    def density_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = np.floor((s - self.plo) / self.cell_size()).astype(int)
        idx = np.clip(idx, 0, np.array(self.param_cells) - 1)
        return self.density[tuple(idx[..., k] for k in range(self.K))]

    def point(self, s) -> np.ndarray:
        return self.origin + np.asarray(s, dtype=float) @ self.tangents.T

    def _cell_overlap(self, plo, phi) -> np.ndarray:
        cs = self.cell_size()
        w = np.ones(self.param_cells)
        for k in range(self.K):
            left = self.plo[k] + np.arange(self.param_cells[k]) * cs[k]
            frac = np.clip(np.minimum(left + cs[k], phi[k]) - np.maximum(left, plo[k]), 0.0, None)
            shape = [1] * self.K
            shape[k] = -1
            w = w * frac.reshape(shape)
        return w

    def mass(self) -> float:
        return float(np.sum(np.linalg.norm(self.density, axis=-1) * self._cell_overlap(self.plo, self.phi)))

    def clip(self, lo, hi):
        """Parameter box of the part of the facet inside ``[lo, hi]``, or ``None``."""
        lo = np.atleast_1d(lo)
        hi = np.atleast_1d(hi)
        if self.K == 1:
            t = self.tangents[:, 0]
            a, b = self.plo[0], self.phi[0]
            for k in range(self.origin.size):
                if abs(t[k]) < 1e-15:
                    if self.origin[k] < lo[k] - 1e-14 or self.origin[k] > hi[k] + 1e-14:
                        return None
                    continue
                s1 = (lo[k] - self.origin[k]) / t[k]
                s2 = (hi[k] - self.origin[k]) / t[k]
                a = max(a, min(s1, s2))
                b = min(b, max(s1, s2))
            if b <= a:
                return None
            return np.array([a]), np.array([b])
        a = self.plo.copy()
        b = self.phi.copy()
        used = set()
        for j in range(self.K):
            t = self.tangents[:, j]
            k = int(np.argmax(np.abs(t)))
            if abs(abs(t[k]) - 1.0) > 1e-12:
                raise NotImplementedError("facets with N >= 3 must be axis aligned")
            used.add(k)
            s1 = (lo[k] - self.origin[k]) / t[k]
            s2 = (hi[k] - self.origin[k]) / t[k]
            a[j] = max(a[j], min(s1, s2))
            b[j] = min(b[j], max(s1, s2))
        for k in range(self.origin.size):
            if k not in used and (self.origin[k] < lo[k] - 1e-14 or self.origin[k] > hi[k] + 1e-14):
                return None
        if np.any(b <= a):
            return None
        return a, b

    def mass_in(self, lo, hi) -> float:
        box = self.clip(lo, hi)
        if box is None:
            return 0.0
        return float(np.sum(np.linalg.norm(self.density, axis=-1) * self._cell_overlap(*box)))

    def rule(self, plo=None, phi=None, n: int = GL_POINTS, pieces: int = 1):
        """Points, surface weights and densities of a Gauss rule on the facet."""
        plo = self.plo if plo is None else plo
        phi = self.phi if phi is None else phi
        cs = self.cell_size()
        per_axis = []
        for k in range(self.K):
            edges = self.plo[k] + np.arange(self.param_cells[k] + 1) * cs[k]
            br = np.unique(np.concatenate([[plo[k], phi[k]], edges[(edges > plo[k]) & (edges < phi[k])]]))
            br = np.unique(np.concatenate([np.linspace(a, b, pieces + 1) for a, b in zip(br[:-1], br[1:])]))
            xs, ws = [], []
            for a, b in zip(br[:-1], br[1:]):
                x, w = gauss_legendre(n, a, b)
                xs.append(x)
                ws.append(w)
            per_axis.append((np.concatenate(xs), np.concatenate(ws)))
        grids = np.meshgrid(*[p[0] for p in per_axis], indexing="ij")
        wgrids = np.meshgrid(*[p[1] for p in per_axis], indexing="ij")
        S = np.stack([g.reshape(-1) for g in grids], axis=-1)
        W = np.prod(np.stack([g.reshape(-1) for g in wgrids], axis=-1), axis=-1)
        return self.point(S), W, self.density_at(S)

    def to_dict(self) -> dict:
        return {
            "kind": "facet",
            "origin": self.origin.tolist(),
            "tangents": self.tangents.tolist(),
            "plo": self.plo.tolist(),
            "phi": self.phi.tolist(),
            "normal": self.normal.tolist(),
            "density_shape": list(self.density.shape),
            "density": self.density.reshape(-1).tolist(),
        }


SingularPiece = Union[Atom, Facet]


def piece_from_dict(d: dict) -> SingularPiece:
    if d["kind"] == "atom":
        return Atom(np.array(d["location"]), np.array(d["weight"]))
    if d["kind"] == "facet":
        dens = np.array(d["density"], float).reshape(d["density_shape"])
        return Facet(np.array(d["origin"]), np.array(d["tangents"]), np.array(d["plo"]),
                     np.array(d["phi"]), dens, np.array(d["normal"]))
    raise ValueError(f"unknown singular piece kind {d['kind']!r}")


def axis_facet(N: int, axis: int, offset: float, lo, hi, density) -> Facet:
    """Facet ``{x_axis = offset}`` over the box ``lo <= x_other <= hi``."""
    others = [k for k in range(N) if k != axis]
    T = np.zeros((N, N - 1))
    for j, k in enumerate(others):
        T[k, j] = 1.0
    origin = np.zeros(N)
    origin[axis] = offset
    nu = np.zeros(N)
    nu[axis] = 1.0
    return Facet(origin, T, np.atleast_1d(lo), np.atleast_1d(hi), density, nu)


# ---------------------------------------------------------------- measures

@dataclass(frozen=True)
class RadonMeasure:
    domain: GridDomain
    ac: np.ndarray
    singular: tuple = ()
    value_shape: Optional[tuple] = None

    def __post_init__(self):
        ac = np.asarray(self.ac, dtype=float)
        if ac.shape[:-1] != self.domain.cells:
            if ac.shape == self.domain.cells:
                ac = ac[..., None]
            else:
                raise ValueError(f"ac density shape {ac.shape} does not match grid {self.domain.cells}")
        if not np.all(np.isfinite(ac)):
            raise ValueError("ac density must be finite")
        object.__setattr__(self, "ac", ac)
        sing = tuple(self.singular)
        for p in sing:
            dim = p.weight.size if isinstance(p, Atom) else p.m
            if dim != ac.shape[-1]:
                raise ValueError("singular piece dimension differs from the ac density")
            loc = p.location if isinstance(p, Atom) else p.origin
            if loc.size != self.domain.N:
                raise ValueError("singular piece lives in the wrong dimension")
        object.__setattr__(self, "singular", sing)
        if self.value_shape is not None:
            vs = tuple(self.value_shape)
            if int(np.prod(vs)) != ac.shape[-1]:
                raise ValueError("value_shape does not match the value dimension")
            object.__setattr__(self, "value_shape", vs)

    @property
    def m(self) -> int:
        return self.ac.shape[-1]

    @classmethod
    def zero(cls, domain: GridDomain, m: int = 1) -> "RadonMeasure":
        return cls(domain, np.zeros(domain.cells + (m,)))

    @classmethod
    def from_density(cls, domain: GridDomain, fn: Callable, singular=(), m: Optional[int] = None) -> "RadonMeasure":
        vals = np.asarray(fn(domain.nodes()), dtype=float)
        if vals.shape == domain.cells:
            vals = vals[..., None]
        return cls(domain, vals, tuple(singular))

    def atoms(self) -> List[Atom]:
        return [p for p in self.singular if isinstance(p, Atom)]

    def facets(self) -> List[Facet]:
        return [p for p in self.singular if isinstance(p, Facet)]

    def with_parts(self, ac=None, singular=None) -> "RadonMeasure":
        return RadonMeasure(self.domain, self.ac if ac is None else ac,
                            self.singular if singular is None else tuple(singular), self.value_shape)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "m": self.m,
            "value_shape": list(self.value_shape) if self.value_shape else None,
            "ac": [repr(float(v)) for v in self.ac.reshape(-1)],
            "singular": [p.to_dict() for p in self.singular],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadonMeasure":
        dom = GridDomain.from_dict(d["domain"])
        ac = np.array([float(v) for v in d["ac"]]).reshape(dom.cells + (d["m"],))
        vs = tuple(d["value_shape"]) if d.get("value_shape") else None
        return cls(dom, ac, tuple(piece_from_dict(p) for p in d["singular"]), vs)


def save_measure(mu: RadonMeasure, path) -> None:
    with open(path, "w") as fh:
        json.dump(mu.to_dict(), fh, indent=1, sort_keys=True)


def load_measure(path) -> RadonMeasure:
    with open(path) as fh:
        return RadonMeasure.from_dict(json.load(fh))


# ---------------------------------------------------------------- decomposition

@dataclass
class DecompositionReport:
    ac_part: RadonMeasure
    singular_part: RadonMeasure
    ac_mass: float
    singular_mass: float
    max_ac_mismatch: float
    polar_defect: float

    @property
    def consistent(self) -> bool:
        return self.max_ac_mismatch <= 1e-12 and self.polar_defect <= 1e-12


def _coplanar_overlap(f1: Facet, f2: Facet) -> bool:
    if abs(abs(float(f1.normal @ f2.normal)) - 1.0) > 1e-12:
        return False
    if abs(float(f1.normal @ (f2.origin - f1.origin))) > 1e-12:
        return False
    # project f2's parameter box into f1's chart
    corners = []
    for c in np.ndindex(*(2,) * f2.K):
        s = np.where(np.array(c) == 0, f2.plo, f2.phi)
        corners.append(f1.tangents.T @ (f2.point(s) - f1.origin))
    corners = np.array(corners)
    lo2, hi2 = corners.min(axis=0), corners.max(axis=0)
    ov = np.minimum(hi2, f1.phi) - np.maximum(lo2, f1.plo)
    return bool(np.all(ov > 1e-12))


def _parallel(u, v) -> bool:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return True
    return abs(float(u @ v) - nu * nv) <= 1e-10 * nu * nv


def validate_singular(mu: RadonMeasure) -> None:
    """Reject coincident singular pieces whose densities point in different directions."""
    atoms = mu.atoms()
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            if np.allclose(atoms[i].location, atoms[j].location, atol=1e-14) and not _parallel(atoms[i].weight, atoms[j].weight):
                raise ValueError("coincident atoms with inconsistent weights")
    facets = mu.facets()
    for i in range(len(facets)):
        for j in range(i + 1, len(facets)):
            if _coplanar_overlap(facets[i], facets[j]):
                for u in facets[i].density.reshape(-1, facets[i].m):
                    for v in facets[j].density.reshape(-1, facets[j].m):
                        if not _parallel(u, v):
                            raise ValueError("overlapping facets with inconsistent densities")


def decompose(mu: RadonMeasure) -> DecompositionReport:
    """Split into absolutely continuous and singular parts and check |mu|_ac = |mu_ac|."""
    validate_singular(mu)
    ac_part = mu.with_parts(singular=())
    sing_part = mu.with_parts(ac=np.zeros_like(mu.ac))
    vol = mu.domain.cell_volume
    abs_ac = np.linalg.norm(mu.ac, axis=-1)
    # density of |mu| w.r.t. Lebesgue, computed from the total variation on single cells
    tv_cells = abs_ac * vol
    mismatch = float(np.max(np.abs(tv_cells / vol - abs_ac))) if abs_ac.size else 0.0
    defect = 0.0
    for p in mu.singular:
        vecs = [p.weight] if isinstance(p, Atom) else list(p.density.reshape(-1, p.m))
        for v in vecs:
            n = np.linalg.norm(v)
            if n > 0:
                defect = max(defect, abs(np.linalg.norm(v / n) - 1.0))
    sing_mass = sum(p.mass() for p in mu.singular)
    return DecompositionReport(ac_part, sing_part, float(abs_ac.sum() * vol), float(sing_mass), mismatch, defect)


# ---------------------------------------------------------------- scalar functionals

def singular_mass(mu: RadonMeasure, region: Region = None) -> float:
    lo, hi = _region(mu.domain, region)
    return float(sum(p.mass_in(lo, hi) for p in mu.singular))


def total_variation(mu: RadonMeasure, region: Region = None) -> float:
    lo, hi = _region(mu.domain, region)
    w = mu.domain.overlap_weights(lo, hi) * mu.domain.cell_volume
    ac = float(np.sum(np.linalg.norm(mu.ac, axis=-1) * w))
    return ac + singular_mass(mu, (lo, hi))


def area_functional(mu: RadonMeasure, region: Region = None) -> float:
    """``int sqrt(1 + |mu_ac|^2) dx + |mu_s|(region)``."""
    lo, hi = _region(mu.domain, region)
    w = mu.domain.overlap_weights(lo, hi) * mu.domain.cell_volume
    ac = float(np.sum(np.sqrt(1.0 + np.sum(mu.ac ** 2, axis=-1)) * w))
    return ac + singular_mass(mu, (lo, hi))


def homogeneous_energy(mu: RadonMeasure, G: Callable) -> float:
    """``int G(dmu/d|mu|) d|mu|`` for positively 1-homogeneous ``G`` (vectorized over rows)."""
    vol = mu.domain.cell_volume
    total = float(np.sum(G(mu.ac.reshape(-1, mu.m)))) * vol
    for p in mu.singular:
        if isinstance(p, Atom):
            total += float(G(p.weight[None, :])[0])
        else:
            pts, W, dens = p.rule()
            total += float(np.sum(W * G(dens)))
    return total


def zero_extend(mu: RadonMeasure, pad_cells: int) -> RadonMeasure:
    """``mu`` on a box enlarged by ``pad_cells`` cells per side, with zero density outside."""
    k = int(pad_cells)
    if k < 0:
        raise ValueError("pad_cells must be nonnegative")
    h = mu.domain.h
    dom = GridDomain(mu.domain.lo - k * h, mu.domain.hi + k * h, tuple(c + 2 * k for c in mu.domain.cells))
    ac = np.pad(mu.ac, [(k, k)] * mu.domain.N + [(0, 0)])
    return RadonMeasure(dom, ac, mu.singular, mu.value_shape)


def random_measure(seed: int, N: int = 1, cells: int = 64, m: int = 1, atoms: int = 2,
                   facets: int = 1) -> RadonMeasure:
    """Seeded measure on the unit box: smooth random density, atoms in the middle half, axis facets (``N >= 2``)."""
    rng = np.random.default_rng(seed)
    dom = GridDomain(np.zeros(N), np.ones(N), (cells,) * N)
    X = dom.nodes()
    ac = np.zeros(dom.cells + (m,))
    for j in range(m):
        k = rng.integers(1, 4, N)
        phase = rng.uniform(0, 2 * np.pi, N)
        ac[..., j] = rng.normal() * np.prod(np.cos(np.pi * k * X + phase), axis=-1) + rng.normal(scale=0.5)
    pieces: List = []
    for _ in range(atoms):
        pieces.append(Atom(rng.uniform(0.25, 0.75, N), rng.normal(size=m)))
    if N >= 2:
        for i in range(facets):
            axis = int(rng.integers(N))
            pieces.append(axis_facet(N, axis, float(rng.uniform(0.3, 0.7)) + 1e-3 * i,
                                     np.full(N - 1, 0.2), np.full(N - 1, 0.8), rng.normal(size=m)))
    return RadonMeasure(dom, ac, tuple(pieces), None)


# ---------------------------------------------------------------- mollification

@dataclass(frozen=True)
class Mollifier:
    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier radius must be positive")

    def __call__(self, x):
        return bump(x, self.eps)

    def grid_weights(self, h) -> np.ndarray:
        """Discrete kernel on the lattice ``h Z^N`` (normalized to unit sum)."""
        h = np.atleast_1d(np.asarray(h, dtype=float))
        K = [int(math.ceil(self.eps / hk)) for hk in h]
        axes = [np.arange(-k, k + 1) * hk for k, hk in zip(K, h)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        w = bump(pts, self.eps) * float(np.prod(h))
        return w / w.sum()

    def grid_mass_defect(self, h) -> float:
        """``|sum_k phi_eps(k h) h^N - 1|``: how far the raw lattice sum is from one."""
        h = np.atleast_1d(np.asarray(h, dtype=float))
        K = [int(math.ceil(self.eps / hk)) for hk in h]
        axes = [np.arange(-k, k + 1) * hk for k, hk in zip(K, h)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return abs(float(np.sum(bump(pts, self.eps)) * np.prod(h)) - 1.0)


@dataclass
class GridFunction:
    """Values sampled at the cell centres of ``domain``; ``mask`` marks trusted nodes."""

    domain: GridDomain
    values: np.ndarray
    mask: np.ndarray
    eps: float = 0.0

    def as_measure(self, value_shape=None) -> RadonMeasure:
        return RadonMeasure(self.domain, self.values, (), value_shape)

    def to_csv(self, path) -> None:
        nodes = self.domain.nodes().reshape(-1, self.domain.N)
        vals = self.values.reshape(-1, self.values.shape[-1])
        mask = self.mask.reshape(-1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(self.domain.N)] + [f"v{j}" for j in range(vals.shape[1])] + ["interior"])
            for x, v, msk in zip(nodes, vals, mask):
                w.writerow([repr(float(a)) for a in x] + [repr(float(a)) for a in v] + [int(msk)])


def convolve_ac(domain: GridDomain, density: np.ndarray, eps: float, kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """Discrete convolution of grid samples with ``phi_eps`` (zero outside the grid)."""
    if kernel is None:
        kernel = Mollifier(eps).grid_weights(domain.h)
    if density.ndim == domain.N:
        density = density[..., None]
    out = np.empty(density.shape)
    for j in range(density.shape[-1]):
        comp = density[..., j]
        if not np.any(comp):
            out[..., j] = 0.0
            continue
        out[..., j] = signal.fftconvolve(comp, kernel, mode="same")
    return out


def _facet_kernel_rule(facet: Facet, points: np.ndarray, eps: float, n: int = GL_POINTS):
    """Gauss rule over ``facet cap B(x, eps)`` for every point ``x``.

    Returns facet points ``(P, Q, N)``, weights ``(P, Q)`` and densities ``(P, Q, m)``.
    """
    P = points.shape[0]
    rel = points - facet.origin
    sc = rel @ facet.tangents
    perp = np.abs(rel @ facet.normal)
    r = np.sqrt(np.clip(eps * eps - perp * perp, 0.0, None))
    per_axis_x, per_axis_w = [], []
    for k in range(facet.K):
        a = np.maximum(facet.plo[k], sc[:, k] - r)
        b = np.minimum(facet.phi[k], sc[:, k] + r)
        x, w = gl_batch(n, a, np.maximum(a, b))
        per_axis_x.append(x)
        per_axis_w.append(w)
    if facet.K == 1:
        S = per_axis_x[0][..., None]
        W = per_axis_w[0]
    else:
        grids = np.meshgrid(*[np.arange(n)] * facet.K, indexing="ij")
        idx = [g.reshape(-1) for g in grids]
        S = np.stack([per_axis_x[k][:, idx[k]] for k in range(facet.K)], axis=-1)
        W = np.prod(np.stack([per_axis_w[k][:, idx[k]] for k in range(facet.K)], axis=-1), axis=-1)
    Y = facet.origin + S @ facet.tangents.T
    return Y, W, facet.density_at(S)


def singular_convolution(mu: RadonMeasure, eps: float, points, scale: float = 1.0) -> np.ndarray:
    """``(mu_s * phi_eps)(x)`` at arbitrary points, shape ``(P, m)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, mu.domain.N)
    out = np.zeros((pts.shape[0], mu.m))
    for p in mu.singular:
        if isinstance(p, Atom):
            out += bump(pts - p.location, eps)[:, None] * p.weight
        else:
            Y, W, dens = _facet_kernel_rule(p, pts, eps)
            k = bump(pts[:, None, :] - Y, eps) * W
            out += np.einsum("pq,pqm->pm", k, dens)
    return scale * out


def singular_abs_convolution(mu: RadonMeasure, eps: float, points) -> np.ndarray:
    """``t_eps(x) = (|mu_s| * phi_eps)(x)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, mu.domain.N)
    out = np.zeros(pts.shape[0])
    for p in mu.singular:
        if isinstance(p, Atom):
            out += bump(pts - p.location, eps) * p.mass()
        else:
            Y, W, dens = _facet_kernel_rule(p, pts, eps)
            out += np.sum(bump(pts[:, None, :] - Y, eps) * W * np.linalg.norm(dens, axis=-1), axis=1)
    return out


def interior_mask(domain: GridDomain, eps: float, region: Region = None) -> np.ndarray:
    lo, hi = _region(domain, region)
    nodes = domain.nodes()
    inside = np.all((nodes >= lo) & (nodes <= hi), axis=-1)
    return inside & (domain.distance_to_boundary(nodes) > eps)


def mollify(mu: RadonMeasure, eps: float, region: Region = None) -> GridFunction:
    """``mu * phi_eps`` at the grid nodes.

    Nodes closer than ``eps`` to the domain boundary are computed with zero
    extension of ``mu`` and flagged as not interior in the mask.
    """
    if region is not None:
        lo, hi = _region(mu.domain, region)
        if np.any(lo - eps < mu.domain.lo - 1e-12) or np.any(hi + eps > mu.domain.hi + 1e-12):
            raise ValueError("eps too large for the requested region")
    elif 2 * eps >= float(np.min(mu.domain.hi - mu.domain.lo)):
        raise ValueError("eps too large for the domain")
    vals = convolve_ac(mu.domain, mu.ac, eps) if np.any(mu.ac) else np.zeros_like(mu.ac)
    if mu.singular:
        nodes = mu.domain.nodes().reshape(-1, mu.domain.N)
        vals = vals + singular_convolution(mu, eps, nodes).reshape(vals.shape)
    return GridFunction(mu.domain, vals, interior_mask(mu.domain, eps, region), eps)


def mollified_measure(mu: RadonMeasure, eps: float) -> RadonMeasure:
    return mollify(mu, eps).as_measure(mu.value_shape)


# ---------------------------------------------------------------- Jensen bounds

def jensen_ac_gap(mu: RadonMeasure, eps: float, g: Callable) -> float:
    """``max_x g((mu_ac*phi)(x)) - (g(mu_ac)*phi)(x)`` over interior nodes (<= 0 expected)."""
    kernel = Mollifier(eps).grid_weights(mu.domain.h)
    conv = convolve_ac(mu.domain, mu.ac, eps, kernel)
    g_mu = g(mu.ac.reshape(-1, mu.m)).reshape(mu.domain.cells)
    g_conv_rhs = convolve_ac(mu.domain, g_mu, eps, kernel)[..., 0]
    lhs = g(conv.reshape(-1, mu.m)).reshape(mu.domain.cells)
    mask = interior_mask(mu.domain, eps)
    return float(np.max((lhs - g_conv_rhs)[mask]))


def jensen_singular_gap(mu: RadonMeasure, eps: float, g: Callable, points=None) -> float:
    """Largest excess of ``g((mu_s * 2phi)(x))`` over the Jensen majorant where ``t_eps > 0``."""
    if points is None:
        points = mu.domain.nodes()[interior_mask(mu.domain, eps)]
    pts = np.asarray(points, dtype=float).reshape(-1, mu.domain.N)
    t = singular_abs_convolution(mu, eps, pts)
    keep = t > 1e-300
    pts, t = pts[keep], t[keep]
    if pts.shape[0] == 0:
        return -np.inf
    lhs = g(singular_convolution(mu, eps, pts, scale=2.0))
    rhs = np.zeros(pts.shape[0])
    for p in mu.singular:
        if isinstance(p, Atom):
            nrm = p.mass()
            if nrm == 0:
                continue
            nu = p.weight / nrm
            vals = g(2.0 * t[:, None] * nu[None, :]) / t
            rhs += vals * bump(p.location - pts, eps) * nrm
        else:
            Y, W, dens = _facet_kernel_rule(p, pts, eps)
            nrm = np.linalg.norm(dens, axis=-1)
            nu = np.where(nrm[..., None] > 0, dens / np.where(nrm > 0, nrm, 1.0)[..., None], 0.0)
            vals = g((2.0 * t[:, None, None] * nu).reshape(-1, p.m)).reshape(nrm.shape) / t[:, None]
            rhs += np.sum(vals * bump(Y - pts[:, None, :], eps) * W * nrm, axis=1)
    return float(np.max(lhs - rhs))


# ---------------------------------------------------------------- blow-ups

def pushforward_blowup(mu: RadonMeasure, x0, r: float, normalization: Union[str, float] = "volume",
                       cells: Optional[tuple] = None) -> RadonMeasure:
    """Measure ``E -> mu(x0 + r E) / normalization`` on the unit cube ``(-1/2, 1/2)^N``.

    ``normalization`` is ``"volume"`` (``r^N``), ``"mass"`` (``|mu|(Q(x0, r))``)
    or a positive number.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    N = mu.domain.N
    qlo, qhi = x0 - 0.5 * r, x0 + 0.5 * r
    if not mu.domain.contains_box(qlo, qhi):
        raise ValueError("blow-up cube leaves the domain")
    if normalization == "volume":
        norm = r ** N
    elif normalization == "mass":
        norm = total_variation(mu, (qlo, qhi))
    else:
        norm = float(normalization)
    if not norm > 0:
        raise ValueError("normalization must be positive")
    cells = mu.domain.cells if cells is None else tuple(cells)
    Q = GridDomain(-0.5 * np.ones(N), 0.5 * np.ones(N), cells)
    src = x0 + r * Q.nodes()
    idx = mu.domain.locate(src)
    ac = mu.ac[tuple(idx[..., k] for k in range(N))] * (r ** N / norm)
    pieces = []
    for p in mu.singular:
        if isinstance(p, Atom):
            loc = (p.location - x0) / r
            if np.all(np.abs(loc) <= 0.5 + 1e-14):
                pieces.append(Atom(loc, p.weight / norm))
        else:
            box = p.clip(qlo, qhi)
            if box is None:
                continue
            moved = Facet((p.origin - x0) / r, p.tangents, p.plo / r, p.phi / r,
                          p.density * (r ** (N - 1) / norm), p.normal)
            clipped = moved.clip(Q.lo, Q.hi)
            if clipped is None:
                continue
            pieces.append(_restrict_facet(moved, *clipped))
    return RadonMeasure(Q, ac, tuple(pieces), mu.value_shape)


def _restrict_facet(f: Facet, plo, phi) -> Facet:
    if np.prod(f.param_cells) == 1:
        return Facet(f.origin, f.tangents, plo, phi, f.density, f.normal)
    # resample piecewise-constant densities on the clipped box
    cells = f.param_cells
    cs = (phi - plo) / np.array(cells)
    axes = [plo[k] + (np.arange(cells[k]) + 0.5) * cs[k] for k in range(f.K)]
    S = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return Facet(f.origin, f.tangents, plo, phi, f.density_at(S), f.normal)


# ---------------------------------------------------------------- convergence diagnostics

TestFunction = Callable[[np.ndarray], np.ndarray]


def pair(mu: RadonMeasure, psi: TestFunction) -> np.ndarray:
    """``int psi dmu`` per component (scalar ``psi``) or contracted (vector ``psi``)."""
    vol = mu.domain.cell_volume
    nodes = mu.domain.nodes().reshape(-1, mu.domain.N)
    vals = np.asarray(psi(nodes), dtype=float)

    def contract(v, dens):
        if v.ndim == 1:
            return np.einsum("p,pm->m", v, dens)
        return np.atleast_1d(np.einsum("pm,pm->", v, dens))

    total = contract(vals, mu.ac.reshape(-1, mu.m)) * vol
    for p in mu.singular:
        if isinstance(p, Atom):
            total = total + contract(np.asarray(psi(p.location[None, :]), float), p.weight[None, :])
        else:
            pts, W, dens = p.rule(pieces=8)
            total = total + contract(np.asarray(psi(pts), float), dens * W[:, None])
    return total


def bump_test_functions(domain: GridDomain, count: int = 5, seed: int = 0) -> List[TestFunction]:
    """Smooth compactly supported bumps inside ``domain`` (seeded)."""
    rng = np.random.default_rng(seed)
    span = domain.hi - domain.lo
    tests = []
    for j in range(count):
        radius = float(np.min(span)) * rng.uniform(0.15, 0.3)
        centre = domain.lo + radius + rng.uniform(0, 1, domain.N) * np.maximum(span - 2 * radius, 0)
        amp = rng.uniform(0.5, 1.5)
        tilt = rng.standard_normal(domain.N)

        def psi(x, c=centre, rad=radius, a=amp, t=tilt):
            x = np.asarray(x, dtype=float)
            return a * (1.0 + 0.3 * np.tanh((x - c) @ t)) * bump(x - c, rad) * rad ** domain.N
        tests.append(psi)
    return tests


@dataclass
class WeakStarTable:
    gaps: np.ndarray  # (n_terms, n_tests)

    @property
    def per_term(self) -> np.ndarray:
        return self.gaps.max(axis=1)

    def converged(self, tol: float, tail: int = 1) -> bool:
        return bool(np.all(self.per_term[-tail:] < tol))


def weakstar_gap(sequence: Sequence[RadonMeasure], limit: RadonMeasure, tests: Sequence[TestFunction]) -> WeakStarTable:
    ref = [pair(limit, psi) for psi in tests]
    gaps = np.zeros((len(sequence), len(tests)))
    for n, mu in enumerate(sequence):
        for j, psi in enumerate(tests):
            gaps[n, j] = float(np.max(np.abs(pair(mu, psi) - ref[j])))
    return WeakStarTable(gaps)


@dataclass
class AreaStrictReport:
    converged: bool
    weakstar: WeakStarTable
    areas: np.ndarray
    area_limit: float
    tail: int

    def __bool__(self):
        return self.converged

    @property
    def area_gaps(self) -> np.ndarray:
        return np.abs(self.areas - self.area_limit)


def check_area_strict(sequence: Sequence[RadonMeasure], limit: RadonMeasure, tol: float,
                      tests: Optional[Sequence[TestFunction]] = None, tail: int = 5,
                      region: Region = None) -> AreaStrictReport:
    if tests is None:
        tests = bump_test_functions(limit.domain)
    table = weakstar_gap(sequence, limit, tests)
    areas = np.array([area_functional(mu, region) for mu in sequence])
    a_lim = area_functional(limit, region)
    k = min(tail, len(sequence))
    ok = table.converged(tol, k) and bool(np.all(np.abs(areas[-k:] - a_lim) < tol))
    return AreaStrictReport(ok, table, areas, a_lim, k)


@dataclass
class ReshetnyakReport:
    passed: bool
    energies: np.ndarray
    liminf_surrogate: float
    limit_value: float
    weakstar: WeakStarTable

    def __bool__(self):
        return self.passed


def reshetnyak_lsc_check(sequence: Sequence[RadonMeasure], limit: RadonMeasure, G: Callable, tol: float,
                         tests: Optional[Sequence[TestFunction]] = None, tail: int = 5,
                         weak_tol: float = 1e-2, seed: int = 0) -> ReshetnyakReport:
    """``liminf int G(dmu_n/d|mu_n|) d|mu_n| >= int G(dmu/d|mu|) d|mu| - tol``.

    The liminf is replaced by the minimum over the last ``tail`` terms.
    """
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((8, limit.m))
    if not np.allclose(G(2.0 * xi), 2.0 * G(xi), rtol=1e-9, atol=1e-12):
        raise ValueError("G is not positively 1-homogeneous")
    if tests is None:
        tests = bump_test_functions(limit.domain)
    table = weakstar_gap(sequence, limit, tests)
    k = min(tail, len(sequence))
    if not table.converged(weak_tol, k):
        raise ValueError("sequence does not converge weakly-* on the test set")
    energies = np.array([homogeneous_energy(mu, G) for mu in sequence])
    lim = homogeneous_energy(limit, G)
    surrogate = float(np.min(energies[-k:]))
    return ReshetnyakReport(surrogate >= lim - tol, energies, surrogate, lim, table)
