"""
Quadrature and matrix assembly.

Univariate matrices are assembled from per-span Gauss-Legendre data;
spatial matrices from tensor-product cell data pushed forward through a
:class:`~spline_upwind.geometry.GeometryMap`.  Space-time operators with a
non-separable coefficient (the theta-weighted stabilization terms) are
assembled cell-by-cell over (space cell) x (time element) blocks; the
separable Galerkin part is kept in Kronecker form.

Global space-time unknowns are ordered colexicographically with the
spatial index fastest: ``global = i_s + N_s * i_t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, GeometryError
from .geometry import GeometryMap, laplacian_coefficients
from .splines import KnotVector, SplineSpace, basis_ders

__all__ = [
    "QuadratureRule",
    "gauss_rule",
    "UnivariateElements",
    "SpatialElements",
    "SystemBlocks",
    "SpaceTimeTerm",
    "assemble_univariate",
    "assemble_spatial",
    "assemble_load",
    "assemble_spacetime",
    "kron_apply",
    "kron_matrix",
    "symmetrize",
]


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Gauss-Legendre points and weights, one row per nonempty knot span.

    With ``subdivisions > 1`` every span is split into equal sub-intervals,
    each carrying its own Gauss rule (rows still correspond to spans).
    """

    points: np.ndarray  # (E, Q)
    weights: np.ndarray  # (E, Q)
    spans: np.ndarray  # (E,) knot-span index of each row

    @property
    def num_points(self) -> int:
        return self.points.shape[1]

    def flat(self):
        return self.points.ravel(), self.weights.ravel()


def gauss_rule(kv: KnotVector, points_per_span: int, subdivisions: int = 1) -> QuadratureRule:
    q = int(points_per_span)
    if q < 1:
        raise ValueError("points_per_span must be >= 1")
    x, w = np.polynomial.legendre.leggauss(q)
    spans = kv.element_spans
    a = kv.knots[spans]
    b = kv.knots[spans + 1]
    sub = np.arange(subdivisions)
    # sub-interval endpoints, shape (E, S)
    lo = a[:, None] + (b - a)[:, None] * sub[None, :] / subdivisions
    width = ((b - a) / subdivisions)[:, None, None]
    pts = lo[:, :, None] + width * (x[None, None, :] + 1) / 2
    wts = np.broadcast_to(width * w[None, None, :] / 2, pts.shape)
    E = spans.size
    return QuadratureRule(pts.reshape(E, -1), np.ascontiguousarray(wts).reshape(E, -1), spans)


class UnivariateElements:
    """Basis derivatives at the quadrature points of every span.

    Attributes
    ----------
    ders : ndarray, shape (E, Q, nders + 1, p + 1)
    index : ndarray of int, shape (E, p + 1)
        Constrained index of each local function (``-1`` if dropped).
    """

    def __init__(self, space: SplineSpace, rule: QuadratureRule, nders: int):
        kv = space.knots
        self.space = space
        self.rule = rule
        self.nders = nders
        p = kv.degree
        E, Q = rule.points.shape
        spans, ders = basis_ders(kv, rule.points.ravel(), nders)
        # points on a span's right endpoint would be attributed to the next span
        if np.any(spans.reshape(E, Q) != rule.spans[:, None]):
            raise ValueError("quadrature point outside its knot span")
        self.ders = ders.reshape(E, Q, nders + 1, p + 1)
        first = rule.spans - p
        full = first[:, None] + np.arange(p + 1)[None, :]
        self.index = space.full_to_constrained[full]

    @property
    def num_elements(self) -> int:
        return self.ders.shape[0]

    @property
    def points(self):
        return self.rule.points

    @property
    def weights(self):
        return self.rule.weights

    def collocation(self, deriv: int) -> sp.csr_matrix:
        """Global matrix ``(E*Q) x dim`` of the ``deriv``-th derivatives."""
        E, Q, _, A = self.ders.shape
        rows = np.repeat(np.arange(E * Q), A)
        cols = np.repeat(self.index, Q, axis=0).ravel()
        vals = self.ders[:, :, deriv, :].ravel()
        keep = cols >= 0
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])),
                             shape=(E * Q, self.space.dim))


def symmetrize(M) -> sp.csr_matrix:
    """Exactly symmetric copy built from the upper triangle."""
    U = sp.triu(M, format="csr")
    return (U + sp.triu(M, k=1, format="csr").T).tocsr()


def assemble_univariate(space: SplineSpace, deriv_row: int, deriv_col: int,
                        points_per_span: int | None = None, weight=None) -> sp.csr_matrix:
    """Matrix ``A[i, j] = int b_j^(deriv_col) b_i^(deriv_row) w`` over the retained basis.

    Derivative orders above the degree give the zero matrix.  ``weight``
    is an optional callable evaluated at the quadrature points.
    """
    p = space.degree
    if max(deriv_row, deriv_col) > p:
        return sp.csr_matrix((space.dim, space.dim))
    q = points_per_span or p + 1
    elems = UnivariateElements(space, gauss_rule(space.knots, q), max(deriv_row, deriv_col))
    w = elems.weights.ravel()
    if weight is not None:
        w = w * np.asarray(weight(elems.points.ravel()), dtype=float)
    R = elems.collocation(deriv_row)
    C = elems.collocation(deriv_col)
    A = (R.T @ sp.diags(w) @ C).tocsr()
    if deriv_row == deriv_col and weight is None:
        A = symmetrize(A)
    A.eliminate_zeros()
    return A


class SpatialElements:
    """Tensor-product cell data of a spatial spline space mapped by ``gmap``.

    Cells, quadrature points and local functions are each linearised
    colexicographically (first direction fastest).

    Attributes
    ----------
    values, grad, lap : ndarrays of shape (C, Qs, As), (C, Qs, As, d), (C, Qs, As)
        Basis values, physical gradients and physical Laplacians.
    wdet : ndarray (C, Qs)
        Quadrature weight times ``|det J|``.
    index : ndarray (C, As)
        Global constrained spatial index of each local function, ``-1`` if dropped.
    """

    def __init__(self, spaces: Sequence[SplineSpace], gmap: GeometryMap,
                 points_per_span: int | None = None):
        spaces = list(spaces)
        if len(spaces) != gmap.dim:
            raise ValueError("number of spatial directions does not match the map dimension")
        self.spaces = spaces
        self.gmap = gmap
        self.dim = d = gmap.dim
        self.univariate = [
            UnivariateElements(s, gauss_rule(s.knots, points_per_span or s.degree + 1), 2)
            for s in spaces
        ]
        self.shape = tuple(s.dim for s in spaces)
        self.num_dofs = int(np.prod(self.shape))
        u = self.univariate

        if d == 1:
            e = u[0]
            vals = e.ders[:, :, 0, :]
            g_eta = e.ders[:, :, 1, :][..., None]
            h_eta = e.ders[:, :, 2, :][..., None, None]
            eta = e.points[..., None]
            w = e.weights
            self.index = e.index
        elif d == 2:
            a, b = u
            vals = self._outer(a.ders[:, :, 0], b.ders[:, :, 0])
            g_eta = np.stack([self._outer(a.ders[:, :, 1], b.ders[:, :, 0]),
                              self._outer(a.ders[:, :, 0], b.ders[:, :, 1])], axis=-1)
            d12 = self._outer(a.ders[:, :, 1], b.ders[:, :, 1])
            h_eta = np.stack([
                np.stack([self._outer(a.ders[:, :, 2], b.ders[:, :, 0]), d12], axis=-1),
                np.stack([d12, self._outer(a.ders[:, :, 0], b.ders[:, :, 2])], axis=-1),
            ], axis=-2)
            E1, Q1 = a.points.shape
            E2, Q2 = b.points.shape
            eta = np.empty((E2, E1, Q2, Q1, 2))
            eta[..., 0] = a.points[None, :, None, :]
            eta[..., 1] = b.points[:, None, :, None]
            eta = eta.reshape(E1 * E2, Q1 * Q2, 2)
            w = (b.weights[:, None, :, None] * a.weights[None, :, None, :]).reshape(E1 * E2, Q1 * Q2)
            n1 = spaces[0].dim
            ia, ib = a.index, b.index
            idx = ia[None, :, None, :] + n1 * ib[:, None, :, None]
            bad = (ia[None, :, None, :] < 0) | (ib[:, None, :, None] < 0)
            idx = np.where(bad, -1, idx)
            self.index = idx.reshape(E1 * E2, -1)
        else:
            raise ValueError("only d = 1 and d = 2 spatial dimensions are supported")

        J = gmap.jacobian(eta)
        H = gmap.hessian(eta)
        det = np.linalg.det(J)
        if np.any(det <= 0) or not np.all(np.isfinite(det)):
            c, q = np.unravel_index(int(np.argmin(det)), det.shape)
            raise GeometryError(f"non-positive Jacobian determinant at cell {c}, "
                                f"quadrature point {q} (eta={eta[c, q]})")
        Jinv, Amat, cvec = laplacian_coefficients(J, H)
        self.eta = eta
        self.x = gmap.evaluate(eta)
        self.detJ = det
        self.wdet = w * det
        self.values = vals
        self.grad = np.einsum("cqak,cqsa->cqsk", Jinv, g_eta)
        self.lap = (np.einsum("cqab,cqsab->cqs", Amat, h_eta)
                    + np.einsum("cqa,cqsa->cqs", cvec, g_eta))

    @staticmethod
    def _outer(a, b):
        # a: (E1, Q1, A1), b: (E2, Q2, A2) -> (E1*E2, Q1*Q2, A1*A2), colex
        E1, Q1, A1 = a.shape
        E2, Q2, A2 = b.shape
        out = np.einsum("xqa,yrb->yxrqba", a, b)
        return out.reshape(E1 * E2, Q1 * Q2, A1 * A2)

    @property
    def num_cells(self) -> int:
        return self.values.shape[0]

    def axis_points(self):
        """Per-direction quadrature coordinates, flattened span-major."""
        return [e.points.ravel() for e in self.univariate]

    def to_cells(self, grid: np.ndarray) -> np.ndarray:
        """Rearrange an array over the tensor grid of :meth:`axis_points`
        (spatial axes first) into cell layout ``(C, Qs, ...)``."""
        rest = grid.shape[self.dim:]
        if self.dim == 1:
            E, Q = self.univariate[0].points.shape
            return grid.reshape((E, Q) + rest)
        (E1, Q1), (E2, Q2) = (e.points.shape for e in self.univariate)
        g = grid.reshape((E1, Q1, E2, Q2) + rest)
        g = np.moveaxis(g, [0, 1, 2, 3], [1, 3, 0, 2])
        return g.reshape((E1 * E2, Q1 * Q2) + rest)

    def _scatter(self, local):
        C, A, _ = local.shape
        rows = np.broadcast_to(self.index[:, :, None], local.shape).ravel()
        cols = np.broadcast_to(self.index[:, None, :], local.shape).ravel()
        keep = (rows >= 0) & (cols >= 0)
        return sp.csr_matrix((local.ravel()[keep], (rows[keep], cols[keep])),
                             shape=(self.num_dofs, self.num_dofs))

    def matrix(self, kind: str) -> sp.csr_matrix:
        """Assemble ``mass``, ``stiffness`` or ``neg_laplacian`` (``int -Lap B_j B_i``)."""
        if kind == "mass":
            local = np.einsum("cqi,cq,cqj->cij", self.values, self.wdet, self.values)
            return symmetrize(self._scatter(local))
        if kind == "stiffness":
            local = np.einsum("cqik,cq,cqjk->cij", self.grad, self.wdet, self.grad)
            return symmetrize(self._scatter(local))
        if kind == "neg_laplacian":
            local = -np.einsum("cqi,cq,cqj->cij", self.values, self.wdet, self.lap)
            return self._scatter(local)
        raise ValueError(f"unknown spatial matrix kind {kind!r}")


def assemble_spatial(spaces: Sequence[SplineSpace], gmap: GeometryMap, kind: str,
                     points_per_span: int | None = None) -> sp.csr_matrix:
    """Spatial mass or stiffness matrix in physical coordinates."""
    return SpatialElements(spaces, gmap, points_per_span).matrix(kind)


@dataclass(eq=False)
class SystemBlocks:
    """Univariate time matrices and spatial matrices of a space-time problem.

    ``D[k]`` holds ``int b_j^(k) b_i^(k) dt`` for ``k = 1..p_t`` (``D[0]`` is
    the mass matrix); the ``h_t`` powers of the stabilization are not
    included.  Spatial blocks are ``None`` for time-only problems.
    """

    W: sp.csr_matrix
    M: sp.csr_matrix
    D: list
    h: float
    K_s: sp.csr_matrix | None = None
    M_s: sp.csr_matrix | None = None
    L_s: sp.csr_matrix | None = None  # int (-Lap B_j) B_i

    @property
    def N_t(self) -> int:
        return self.W.shape[0]

    @property
    def N_s(self) -> int:
        return 1 if self.M_s is None else self.M_s.shape[0]

    @property
    def degree(self) -> int:
        return len(self.D) - 1

    @classmethod
    def from_spaces(cls, time_space: SplineSpace, spatial_elements: SpatialElements | None = None):
        p = time_space.degree
        W = assemble_univariate(time_space, 0, 1)
        D = [assemble_univariate(time_space, k, k) for k in range(p + 1)]
        blocks = cls(W=W, M=D[0], D=D, h=time_space.knots.h)
        if spatial_elements is not None:
            blocks.M_s = spatial_elements.matrix("mass")
            blocks.K_s = spatial_elements.matrix("stiffness")
            blocks.L_s = spatial_elements.matrix("neg_laplacian")
        return blocks

    def galerkin_pairs(self):
        """``[(W_t, M_s), (M_t, K_s)]``: the Galerkin heat matrix in factored form."""
        return [(self.W, self.M_s), (self.M, self.K_s)]


def kron_matrix(pairs) -> sp.csr_matrix:
    """Explicit ``sum_r T_r (x) S_r`` (time factor outer, space inner)."""
    out = None
    for T, S in pairs:
        term = sp.kron(T, S, format="csr")
        out = term if out is None else out + term
    return out.tocsr()


def kron_apply(pairs, v) -> np.ndarray:
    """``(sum_r T_r (x) S_r) v`` without forming the Kronecker products.

    ``pairs`` is a list of ``(time_factor, space_factor)`` or a
    :class:`SystemBlocks` (Galerkin heat matrix).  Uses
    ``(T (x) S) vec(U) = vec(S U T^T)`` with ``U`` of shape ``(N_s, N_t)``.
    """
    if isinstance(pairs, SystemBlocks):
        pairs = pairs.galerkin_pairs()
    T0, S0 = pairs[0]
    Nt, Ns = T0.shape[1], S0.shape[1]
    v = np.asarray(v, dtype=float)
    if v.shape != (Ns * Nt,):
        raise ValueError(f"vector of length {v.size} does not match N_s*N_t = {Ns * Nt}")
    U = v.reshape((Ns, Nt), order="F")
    out = np.zeros((S0.shape[0], T0.shape[0]))
    for T, S in pairs:
        out += S @ (T @ U.T).T
    return out.ravel(order="F")


def _axis_rules(space: SplineSpace, q: int, subdivisions: int):
    rule = gauss_rule(space.knots, q, subdivisions)
    x, w = rule.flat()
    return x, w


def assemble_load(spaces: Sequence[SplineSpace], gmap: GeometryMap | None, f: Callable,
                  time_space: SplineSpace, time_deriv: int = 0, weight: Callable | None = None,
                  points_per_span: int | None = None, space_subdivisions: int = 1,
                  time_subdivisions: int = 1) -> np.ndarray:
    """Load vector ``F_i = int int f w (d_t^k B_i) dOmega dt``, colex ordered.

    Parameters
    ----------
    spaces, gmap :
        Spatial spaces and map; pass an empty sequence and ``None`` for a
        time-only problem, in which case ``f`` is called as ``f(t)``.
        Otherwise ``f(x, t)`` receives ``x`` of shape ``(..., d)``.
    weight :
        Optional ``weight(axes, t)`` returning an array over the tensor
        grid of the parametric spatial axes and time points.
    space_subdivisions :
        Split every spatial span into this many Gauss sub-rules; useful for
        sources much narrower than a span.
    """
    pt = time_space.degree
    qt = points_per_span or pt + 1
    t, wt = _axis_rules(time_space, qt, time_subdivisions)
    Bt = _collocation(time_space, t, time_deriv)

    if not spaces:
        vals = np.asarray(f(t), dtype=float) * np.ones_like(t)
        _check_finite(vals, lambda k: f"t={t[k]}")
        g = wt * vals
        if weight is not None:
            g = g * weight([], t)
        return Bt.T @ g

    axes, wax, mats = [], [], []
    for s in spaces:
        x, w = _axis_rules(s, points_per_span or s.degree + 1, space_subdivisions)
        axes.append(x)
        wax.append(w)
        mats.append(_collocation(s, x, 0))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    J = gmap.jacobian(mesh)
    det = np.abs(np.linalg.det(J))
    wspace = det
    for l, w in enumerate(wax):
        shape = [1] * len(axes)
        shape[l] = w.size
        wspace = wspace * w.reshape(shape)
    xphys = gmap.evaluate(mesh)
    d = len(axes)
    vals = np.asarray(f(xphys[..., None, :], t.reshape((1,) * d + (-1,))), dtype=float)
    vals = np.broadcast_to(vals, mesh.shape[:-1] + t.shape)
    if not np.all(np.isfinite(vals)):
        k = np.unravel_index(int(np.argmax(~np.isfinite(vals))), vals.shape)
        raise DataError(f"non-finite forcing value at x={xphys[k[:-1]]}, t={t[k[-1]]}")
    G = vals * wspace[..., None] * wt
    if weight is not None:
        G = G * weight(axes, t)
    # contract one spatial axis at a time, then time
    for l, B in enumerate(mats):
        G = np.moveaxis(_contract(B, G, l), 0, l)
    R = _contract(Bt, G, d)
    R = np.moveaxis(R, 0, d)
    return R.reshape(-1, order="F")


def _contract(B, G, axis):
    """``sum_q B[q, i] G[..., q, ...]`` along ``axis``; result has ``i`` first."""
    Gm = np.moveaxis(G, axis, 0)
    shape = Gm.shape
    out = B.T @ Gm.reshape(shape[0], -1)
    return np.asarray(out).reshape((B.shape[1],) + shape[1:])


def _collocation(space: SplineSpace, x, deriv):
    from .splines import basis_matrix
    return basis_matrix(space.knots, x, deriv, space)


def _check_finite(vals, where):
    if not np.all(np.isfinite(vals)):
        k = int(np.argmax(~np.isfinite(vals)))
        raise DataError(f"non-finite forcing value at {where(k)}")


@dataclass(frozen=True)
class SpaceTimeTerm:
    """One bilinear term ``int int c (op_s B_j)(d_t^a b_j)(op_s B_i)(d_t^b b_i)``.

    ``space_test``/``space_trial`` are ``"value"``, ``"grad"`` (both sides
    must then be ``"grad"``; a dot product is taken) or ``"neg_laplacian"``
    (trial side only).  ``row_scale`` multiplies row ``i`` by a factor
    depending on its time index.
    """

    time_test: int
    time_trial: int
    space_test: str = "value"
    space_trial: str = "value"
    row_scale: np.ndarray | None = None


def assemble_spacetime(selem: SpatialElements, telem: UnivariateElements, terms,
                       coeff: np.ndarray | None = None) -> sp.csr_matrix:
    """Assemble ``sum`` of :class:`SpaceTimeTerm` with a common coefficient.

    ``coeff`` has shape ``(C, Qs, Et, Qt)`` (spatial cell layout by time
    element layout) or is ``None`` for the constant 1.  Work is organised
    per (space cell, time element) pair and reduced in a fixed order.
    """
    C, Qs, As = selem.values.shape
    Et, Qt, _, At = telem.ders.shape
    if coeff is None:
        coeff = np.ones((C, Qs, Et, Qt))
    wt = telem.weights
    local = np.zeros((C, Et * At * At, As * As))
    for term in terms:
        Tt = telem.ders[:, :, term.time_test, :]
        Tr = telem.ders[:, :, term.time_trial, :]
        if term.row_scale is not None:
            scale = np.where(telem.index >= 0,
                             np.asarray(term.row_scale)[np.maximum(telem.index, 0)], 0.0)
            Tt = Tt * scale[:, None, :]
        Z = np.einsum("eq,eqa,eqb->eqab", wt, Tt, Tr)
        X = np.einsum("cpeq,eqab->cpeab", coeff, Z, optimize=True)
        X = X.reshape(C, Qs, Et * At * At)
        K = _space_kernel(selem, term.space_test, term.space_trial)
        local += np.matmul(np.swapaxes(X, 1, 2), K.reshape(C, Qs, As * As))
    return _scatter_spacetime(selem, telem, local)


def _space_kernel(selem: SpatialElements, test: str, trial: str) -> np.ndarray:
    w = selem.wdet[..., None, None]
    if test == "value" and trial == "value":
        return w * selem.values[:, :, :, None] * selem.values[:, :, None, :]
    if test == "grad" and trial == "grad":
        return w * np.einsum("cqik,cqjk->cqij", selem.grad, selem.grad)
    if test == "value" and trial == "neg_laplacian":
        return -w * selem.values[:, :, :, None] * selem.lap[:, :, None, :]
    raise ValueError(f"unsupported spatial operator pair ({test}, {trial})")


def _scatter_spacetime(selem, telem, local):
    C, _, As = selem.values.shape
    Et, _, _, At = telem.ders.shape
    Ns = selem.num_dofs
    Nt = telem.space.dim
    gs, gt = selem.index, telem.index
    shape = (C, Et, At, At, As, As)
    rs = gs[:, None, None, None, :, None]
    cs = gs[:, None, None, None, None, :]
    rt = gt[None, :, :, None, None, None]
    ct = gt[None, :, None, :, None, None]
    valid = np.broadcast_to((rs >= 0) & (cs >= 0) & (rt >= 0) & (ct >= 0), shape)
    rows = np.broadcast_to(rs + Ns * rt, shape)[valid]
    cols = np.broadcast_to(cs + Ns * ct, shape)[valid]
    vals = local.reshape(shape)[valid]
    A = sp.csr_matrix((vals, (rows, cols)), shape=(Ns * Nt, Ns * Nt))
    A.sum_duplicates()
    return A
