"""
Univariate B-spline spaces.

Knot vectors are stored in the coordinates in which the spline is
evaluated (physical time on ``[0, T]`` for the time direction, the
parametric unit interval for spatial directions).  Basis functions and
their derivatives are evaluated with the Cox-de Boor recursion in the
triangular-table form of Piegl & Tiller (The NURBS Book, A2.1 / A2.3),
vectorised over evaluation points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ParameterError

__all__ = [
    "KnotVector",
    "SplineSpace",
    "make_open_uniform_knots",
    "knots_from_breakpoints",
    "find_spans",
    "basis_ders",
    "eval_basis",
    "basis_matrix",
    "greville_abscissae",
    "linearize_index",
    "delinearize_index",
]

_DOMAIN_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open knot vector of degree ``degree``.

    Parameters
    ----------
    degree : int
        Polynomial degree p >= 1.
    knots : array_like
        Nondecreasing knot values; the first and last value must be
        repeated ``p + 1`` times.
    """

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        p = int(self.degree)
        if p < 1:
            raise ParameterError(f"degree must be >= 1, got {self.degree}")
        if knots.ndim != 1 or knots.size < 2 * (p + 1):
            raise ParameterError("knot vector too short for the requested degree")
        if np.any(np.diff(knots) < 0):
            raise ParameterError("knots must be nondecreasing")
        if not (np.all(knots[: p + 1] == knots[0]) and np.all(knots[-p - 1:] == knots[-1])):
            raise ParameterError("knot vector must be open (end knots repeated p+1 times)")
        if knots[-1] <= knots[0]:
            raise ParameterError("knot vector spans an empty interval")
        knots.setflags(write=False)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "knots", knots)

    @property
    def p(self) -> int:
        return self.degree

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @cached_property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def num_elements(self) -> int:
        return self.breakpoints.size - 1

    @cached_property
    def span_lengths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def h(self) -> float:
        """Mesh size: the largest knot span."""
        return float(self.span_lengths.max())

    @property
    def alpha(self) -> float:
        """Quasi-uniformity ratio min(span) / max(span)."""
        lengths = self.span_lengths
        return float(lengths.min() / lengths.max())

    @cached_property
    def element_spans(self) -> np.ndarray:
        """Knot-span index (0-based, ``p <= s <= n-1``) of every nonempty span."""
        idx = np.nonzero(np.diff(self.knots) > 0)[0]
        return idx

    def __repr__(self):
        a, b = self.interval
        return (f"KnotVector(p={self.degree}, n={self.n}, elements={self.num_elements}, "
                f"interval=[{a:g}, {b:g}])")


def make_open_uniform_knots(p, num_elements, interval=(0.0, 1.0)) -> KnotVector:
    """Open knot vector with ``num_elements`` equal spans and simple interior knots."""
    if int(p) != p or p < 1:
        raise ParameterError(f"degree must be a positive integer, got {p}")
    if int(num_elements) != num_elements or num_elements < 1:
        raise ParameterError(f"num_elements must be a positive integer, got {num_elements}")
    a, b = map(float, interval)
    if not a < b:
        raise ParameterError(f"invalid interval [{a}, {b}]")
    breaks = np.linspace(a, b, int(num_elements) + 1)
    return knots_from_breakpoints(int(p), breaks)


def knots_from_breakpoints(p, breakpoints, multiplicity=1) -> KnotVector:
    """Open knot vector on the given breakpoints with uniform interior multiplicity."""
    breaks = np.asarray(breakpoints, dtype=float)
    if breaks.ndim != 1 or breaks.size < 2 or np.any(np.diff(breaks) <= 0):
        raise ParameterError("breakpoints must be strictly increasing with at least two values")
    if not 1 <= multiplicity <= p:
        raise ParameterError("interior multiplicity must lie in [1, p]")
    knots = np.concatenate([
        np.full(p + 1, breaks[0]),
        np.repeat(breaks[1:-1], multiplicity),
        np.full(p + 1, breaks[-1]),
    ])
    return KnotVector(p, knots)


@dataclass(frozen=True, eq=False)
class SplineSpace:
    """B-spline space with an optional set of dropped basis functions.

    ``drop`` holds the (0-based) indices of basis functions removed to
    impose homogeneous conditions: ``"first"`` for an initial condition,
    ``"both"`` for Dirichlet conditions at both ends.
    """

    knots: KnotVector
    drop: tuple = field(default=())

    def __post_init__(self):
        n = self.knots.n
        drop = self.drop
        if drop in (None, "none"):
            drop = ()
        elif drop == "first":
            drop = (0,)
        elif drop == "last":
            drop = (n - 1,)
        elif drop == "both":
            drop = (0, n - 1)
        drop = tuple(sorted({int(i) % n for i in drop}))
        object.__setattr__(self, "drop", drop)

    @classmethod
    def time(cls, kv: KnotVector):
        """Time space with the initial condition imposed (first function dropped)."""
        return cls(kv, "first")

    @classmethod
    def dirichlet(cls, kv: KnotVector):
        """Space with both end functions dropped."""
        return cls(kv, "both")

    @property
    def degree(self) -> int:
        return self.knots.degree

    @property
    def n_full(self) -> int:
        return self.knots.n

    @property
    def dim(self) -> int:
        return self.knots.n - len(self.drop)

    @cached_property
    def active(self) -> np.ndarray:
        """Full indices of the retained basis functions, in order."""
        mask = np.ones(self.knots.n, dtype=bool)
        mask[list(self.drop)] = False
        return np.nonzero(mask)[0]

    @cached_property
    def full_to_constrained(self) -> np.ndarray:
        """Map full index -> constrained index, ``-1`` for dropped functions."""
        out = -np.ones(self.knots.n, dtype=np.int64)
        out[self.active] = np.arange(self.active.size)
        return out

    def expand(self, coefficients) -> np.ndarray:
        """Coefficients on the full basis (zeros at dropped functions)."""
        c = np.asarray(coefficients, dtype=float)
        full = np.zeros(c.shape[:-1] + (self.knots.n,))
        full[..., self.active] = c
        return full


def find_spans(kv: KnotVector, x) -> np.ndarray:
    """Knot-span index ``s`` with ``knots[s] <= x < knots[s+1]`` (closed at the right end)."""
    x = np.asarray(x, dtype=float)
    a, b = kv.interval
    tol = _DOMAIN_TOL * max(1.0, b - a)
    if np.any(x < a - tol) or np.any(x > b + tol):
        bad = x[(x < a - tol) | (x > b + tol)].ravel()[0]
        raise DomainError(f"point {bad!r} outside spline domain [{a}, {b}]")
    spans = np.searchsorted(kv.knots, x, side="right") - 1
    return np.clip(spans, kv.degree, kv.n - 1)


def basis_ders(kv: KnotVector, x, nders: int = 0):
    """Nonzero basis functions and derivatives at points ``x``.

    Returns
    -------
    spans : ndarray of int, shape (N,)
        Span index; the active functions are ``spans - p + a``, ``a = 0..p``.
    ders : ndarray, shape (N, nders + 1, p + 1)
        ``ders[j, k, a]`` is the k-th derivative of function ``spans[j]-p+a``
        at ``x[j]``.  Orders above ``p`` are identically zero.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    p = kv.degree
    U = kv.knots
    spans = find_spans(kv, x)
    x = np.clip(x, *kv.interval)
    npts = x.size

    ndu = np.zeros((npts, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((npts, p + 1))
    right = np.zeros((npts, p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - U[spans + 1 - j]
        right[:, j] = U[spans + j] - x
        saved = np.zeros(npts)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = _safe_div(ndu[:, r, j - 1], ndu[:, j, r])
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    nk = min(nders, p)
    ders = np.zeros((npts, nders + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]
    if nk == 0:
        return spans, ders

    a = np.zeros((npts, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[:, 0, 0] = 1.0
        for k in range(1, nk + 1):
            d = np.zeros(npts)
            rk, pk = r - k, p - k
            if r >= k:
                a[:, s2, 0] = _safe_div(a[:, s1, 0], ndu[:, pk + 1, rk])
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = _safe_div(a[:, s1, j] - a[:, s1, j - 1], ndu[:, pk + 1, rk + j])
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, k] = _safe_div(-a[:, s1, k - 1], ndu[:, pk + 1, r])
                d = d + a[:, s2, k] * ndu[:, r, pk]
            ders[:, k, r] = d
            s1, s2 = s2, s1

    fac = float(p)
    for k in range(1, nk + 1):
        ders[:, k, :] *= fac
        fac *= p - k
    return spans, ders


def _safe_div(num, den):
    # 0/0 := 0 (zero-length knot differences)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def eval_basis(kv: KnotVector, t: float, max_deriv: int = 0):
    """Active basis functions at a single point.

    Returns ``(indices, table)`` where ``indices`` are the 0-based indices of
    the ``p + 1`` functions whose support contains ``t`` and ``table[k, a]``
    is the k-th derivative of ``indices[a]``.
    """
    if max_deriv < 0:
        raise ParameterError("max_deriv must be nonnegative")
    spans, ders = basis_ders(kv, [t], max_deriv)
    first = spans[0] - kv.degree
    return np.arange(first, first + kv.degree + 1), ders[0]


def basis_matrix(kv: KnotVector, x, deriv: int = 0, space: SplineSpace | None = None):
    """Collocation matrix ``B[j, i] = b_i^{(deriv)}(x_j)`` in CSR format.

    When ``space`` is given the columns are restricted to its retained
    functions.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    p = kv.degree
    spans, ders = basis_ders(kv, x, deriv)
    rows = np.repeat(np.arange(x.size), p + 1)
    cols = (spans[:, None] - p + np.arange(p + 1)[None, :]).ravel()
    vals = ders[:, deriv, :].ravel()
    B = sp.csr_matrix((vals, (rows, cols)), shape=(x.size, kv.n))
    if space is not None:
        B = B[:, space.active]
    return B


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    """Averages of ``p`` consecutive knots, one per basis function."""
    p, U = kv.degree, kv.knots
    windows = np.lib.stride_tricks.sliding_window_view(U[1:-1], p)
    return windows.mean(axis=1)


def linearize_index(idx: Sequence[int], dims: Sequence[int], base: int = 0) -> int:
    """Colexicographic (first index fastest) linear index.

    ``base`` selects 0- or 1-based numbering for both input and output.
    """
    if len(idx) != len(dims):
        raise IndexError("index and dimension tuples differ in length")
    lin, stride = 0, 1
    for i, n in zip(idx, dims):
        i0 = int(i) - base
        if not 0 <= i0 < n:
            raise IndexError(f"index component {i} out of range for dimension {n}")
        lin += i0 * stride
        stride *= int(n)
    return lin + base


def delinearize_index(lin: int, dims: Sequence[int], base: int = 0) -> tuple:
    """Inverse of :func:`linearize_index`."""
    total = int(np.prod(dims))
    l0 = int(lin) - base
    if not 0 <= l0 < total:
        raise IndexError(f"linear index {lin} out of range for dims {tuple(dims)}")
    out = []
    for n in dims:
        out.append(l0 % n + base)
        l0 //= n
    return tuple(out)
