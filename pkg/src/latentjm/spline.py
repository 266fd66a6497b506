"""B-spline bases orthonormalized in L2 over the study time domain.

The raw B-spline basis is built with :mod:`scipy.interpolate`; the Gram
matrix is integrated exactly with Gauss-Legendre panels between knots and the
basis is multiplied by its inverse symmetric square root, so that

    integral_{t_lo}^{t_hi} b(t) b(t)^T dt = I_q

on the (possibly transformed) time axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

from .errors import InvalidDegree, InvalidKnots, OutOfDomain

TIME_TRANSFORMS = ("identity", "log1p")

# relative slack for evaluation exactly at the domain ends after float round-off
_DOMAIN_SLACK = 1e-12


def _forward(t, transform):
    if transform == "identity":
        return np.asarray(t, dtype=float)
    return np.log1p(np.asarray(t, dtype=float))


def _inverse(u, transform):
    if transform == "identity":
        return np.asarray(u, dtype=float)
    return np.expm1(np.asarray(u, dtype=float))


@dataclass(frozen=True)
class BasisSpec:
    """Configuration of a spline basis.

    Parameters
    ----------
    degree : int
        Polynomial degree (3 is cubic).
    interior_knots : sequence of float
        Strictly increasing knots, in study-time units, strictly inside
        ``domain``.
    domain : (float, float)
        Closed interval ``[t_lo, t_hi]`` in study-time units.
    time_transform : {'identity', 'log1p'}
        Transform applied to time before the basis is evaluated.  The Gram
        matrix is integrated on the transformed axis.
    """

    degree: int = 3
    interior_knots: tuple = ()
    domain: tuple = (0.0, 1.0)
    time_transform: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "interior_knots", tuple(float(k) for k in self.interior_knots))
        object.__setattr__(self, "domain", tuple(float(d) for d in self.domain))

    @property
    def q(self) -> int:
        return self.degree + 1 + len(self.interior_knots)

    @classmethod
    def evenly_spaced(cls, n_knots: int, domain: Sequence[float], degree: int = 3,
                      time_transform: str = "identity") -> "BasisSpec":
        """Spec with ``n_knots`` interior knots evenly spaced on the transformed axis."""
        if n_knots < 0:
            raise InvalidKnots("number of knots must be non-negative")
        if time_transform not in TIME_TRANSFORMS:
            raise ValueError(f"unknown time transform {time_transform!r}")
        lo, hi = (float(d) for d in domain)
        ulo, uhi = _forward([lo, hi], time_transform)
        u = np.linspace(ulo, uhi, n_knots + 2)[1:-1]
        knots = _inverse(u, time_transform)
        return cls(degree=degree, interior_knots=tuple(knots.tolist()), domain=(lo, hi),
                   time_transform=time_transform)

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "interior_knots": list(self.interior_knots),
            "domain": list(self.domain),
            "time_transform": self.time_transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        """Accepts either explicit ``interior_knots`` or an ``n_knots`` count."""
        transform = d.get("time_transform", "identity")
        degree = int(d.get("degree", 3))
        if "interior_knots" in d and d["interior_knots"] is not None:
            return cls(degree=degree, interior_knots=tuple(d["interior_knots"]),
                       domain=tuple(d["domain"]), time_transform=transform)
        return cls.evenly_spaced(int(d.get("n_knots", 0)), d["domain"], degree=degree,
                                 time_transform=transform)


def _validate(spec: BasisSpec):
    if not isinstance(spec.degree, (int, np.integer)) or spec.degree < 0:
        raise InvalidDegree(f"degree must be a non-negative integer, got {spec.degree!r}")
    if spec.time_transform not in TIME_TRANSFORMS:
        raise ValueError(f"unknown time transform {spec.time_transform!r}")
    lo, hi = spec.domain
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise InvalidKnots(f"domain must satisfy t_lo < t_hi, got {spec.domain}")
    if spec.time_transform == "log1p" and lo <= -1:
        raise InvalidKnots("log1p transform needs t_lo > -1")
    k = np.asarray(spec.interior_knots, dtype=float)
    if k.size:
        if np.any(np.diff(k) <= 0):
            raise InvalidKnots("interior knots must be strictly increasing")
        if k[0] <= lo or k[-1] >= hi:
            raise InvalidKnots("interior knots must lie strictly inside the domain")


@dataclass(frozen=True, eq=False)
class OrthoBasis:
    """Orthonormalized B-spline basis; call it to evaluate ``b(t)``.

    ``gram_root_inverse`` maps raw B-spline values to orthonormal values:
    ``b(t) = gram_root_inverse @ raw(t)``.
    """

    spec: BasisSpec
    q: int
    knot_vector: np.ndarray = field(repr=False)
    gram_raw: np.ndarray = field(repr=False)
    gram_root_inverse: np.ndarray = field(repr=False)

    @property
    def domain(self):
        return self.spec.domain

    def transform(self, t):
        return _forward(t, self.spec.time_transform)

    def _checked_u(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.spec.domain
        slack = _DOMAIN_SLACK * max(1.0, abs(lo), abs(hi))
        if np.any(~np.isfinite(t)) or np.any(t < lo - slack) or np.any(t > hi + slack):
            bad = t[(~np.isfinite(t)) | (t < lo - slack) | (t > hi + slack)]
            raise OutOfDomain(f"time {bad.ravel()[0]!r} outside basis domain [{lo}, {hi}]")
        u = self.transform(np.clip(t, lo, hi))
        ulo, uhi = self.knot_vector[0], self.knot_vector[-1]
        return np.clip(u, ulo, uhi)

    def raw(self, t) -> np.ndarray:
        """Raw (non-orthonormalized) B-spline values, shape ``t.shape + (q,)``."""
        u = self._checked_u(t)
        flat = u.ravel()
        if flat.size == 0:
            return np.zeros(u.shape + (self.q,))
        dm = BSpline.design_matrix(flat, self.knot_vector, self.spec.degree).toarray()
        return dm.reshape(u.shape + (self.q,))

    def __call__(self, t) -> np.ndarray:
        return self.raw(t) @ self.gram_root_inverse

    def raw_coefficients(self, coef) -> np.ndarray:
        """Raw B-spline coefficients ``c`` such that ``raw(t) @ c == b(t) @ coef``."""
        return self.gram_root_inverse @ np.asarray(coef, dtype=float)

    def spline(self, coef) -> BSpline:
        """A :class:`scipy.interpolate.BSpline` on the transformed axis for ``b(u) @ coef``."""
        return BSpline(self.knot_vector, self.raw_coefficients(coef), self.spec.degree,
                       extrapolate=False)


def panel_rule(basis: OrthoBasis, n_points: int):
    """Gauss-Legendre nodes and weights placed on every inter-knot panel.

    Returned nodes are on the transformed axis.
    """
    x, w = np.polynomial.legendre.leggauss(n_points)
    breaks = np.unique(basis.knot_vector)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    nodes = (a[:, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def build_basis(spec: BasisSpec) -> OrthoBasis:
    """Construct the orthonormalized basis described by ``spec``."""
    _validate(spec)
    d = int(spec.degree)
    lo, hi = _forward(spec.domain, spec.time_transform)
    inner = _forward(np.asarray(spec.interior_knots, dtype=float), spec.time_transform)
    knot_vector = np.concatenate([np.full(d + 1, lo), inner, np.full(d + 1, hi)])
    q = d + 1 + inner.size

    # products of degree-d pieces have degree 2d: d + 1 points per panel are exact
    x, w = np.polynomial.legendre.leggauss(d + 1)
    breaks = np.unique(knot_vector)
    gram = np.zeros((q, q))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        u = a + half * (x + 1.0)
        dm = BSpline.design_matrix(u, knot_vector, d).toarray()
        gram += (dm * (half * w)[:, None]).T @ dm
    gram = 0.5 * (gram + gram.T)

    evals, evecs = np.linalg.eigh(gram)
    if evals.min() <= 0.0:
        raise InvalidKnots("raw Gram matrix is singular")
    root_inv = (evecs / np.sqrt(evals)) @ evecs.T
    root_inv = 0.5 * (root_inv + root_inv.T)
    for arr in (knot_vector, gram, root_inv):
        arr.setflags(write=False)
    return OrthoBasis(spec=spec, q=q, knot_vector=knot_vector, gram_raw=gram,
                      gram_root_inverse=root_inv)


def eval_basis(basis: OrthoBasis, t) -> np.ndarray:
    """Orthonormal basis values at ``t`` (study-time units)."""
    return basis(t)
