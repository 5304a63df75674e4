"""
Spline upwind stabilization.

The per-row coefficient tables ``tau[i, k]`` / ``sigma[i, k]`` are chosen
so that adding ``sum_k tau[i,k] h^(2k-1) int b_j^(k) b_i^(k)`` to the time
advection matrix (resp. ``sum_k sigma[i,k] h^(2k) ...`` to the time mass
matrix) annihilates its strict upper triangle.  Operators defined on top
of the tables:

* NCSU: the full linear combination, always active.
* SU: the first-order term is residual-consistent where ``theta = 0``;
  the higher-order (and, for the heat equation, the mixed space-time)
  diffusions are weighted by the shock indicator ``theta``.
* SUPG and residual-based shock capturing for comparison.

Sign convention: every forcing-dependent stabilization integral is moved
to the right-hand side, so the discrete problem always reads ``A u = F``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ParameterError, StabilizationError
from .splines import basis_ders, knots_from_breakpoints

__all__ = [
    "StabilizationTable",
    "compute_tau",
    "compute_sigma",
    "compute_tables",
    "ncsu_matrix",
    "sigma_matrix",
    "ThetaField",
    "compute_theta",
    "sample_axis",
    "window_max",
    "residual_field",
    "theta_from_solution",
    "su_operators",
    "supg_operators",
    "shock_capturing_operator",
    "su_time_factors",
    "write_table_csv",
]

log = logging.getLogger(__name__)

MAX_CONDITION = 1e14
SUPG_FIRST_ORDER = 0.5  # tau_SUPG = h/2 in units of h


@dataclass(eq=False)
class StabilizationTable:
    """Upwind coefficients, rows = constrained time basis functions.

    Attributes
    ----------
    tau, sigma : ndarray (N_t, p)
        Column ``k-1`` holds the coefficient of the ``k``-th derivative
        term.  Entries beyond the active length ``r[i]`` are zero.
    cond_tau, cond_sigma : ndarray (N_t,)
        2-norm condition numbers of the local systems (``nan`` where
        ``r[i] = 0``).
    """

    tau: np.ndarray
    h: float
    cond_tau: np.ndarray
    sigma: np.ndarray | None = None
    cond_sigma: np.ndarray | None = None

    @property
    def N_t(self) -> int:
        return self.tau.shape[0]

    @property
    def degree(self) -> int:
        return self.tau.shape[1]

    @property
    def active_length(self) -> np.ndarray:
        active = getattr(self, "_active", None)
        if active is not None:
            return active
        N, p = self.tau.shape
        return np.minimum(p, N - 1 - np.arange(N))

    def first_order(self) -> np.ndarray:
        """Coefficient of the always-active first-order upwind term.

        Equal to ``tau[:, 0]`` except in rows without an upper triangle to
        annihilate (the last row), which take the SUPG value ``1/2``.  In
        those rows the term is the full residual form, independent of theta,
        so it stays consistent at the outflow end.
        """
        c = self.tau[:, 0].copy()
        c[self.active_length == 0] = SUPG_FIRST_ORDER
        return c

    def restrict(self, rows) -> "StabilizationTable":
        """Table of a subset of the rows (for spaces with further constraints).

        The active lengths are carried over from the parent table.
        """
        rows = np.asarray(rows)
        sub = StabilizationTable(
            tau=self.tau[rows], h=self.h, cond_tau=self.cond_tau[rows],
            sigma=None if self.sigma is None else self.sigma[rows],
            cond_sigma=None if self.cond_sigma is None else self.cond_sigma[rows])
        sub._active = self.active_length[rows]
        return sub

    @property
    def fallback_rows(self) -> np.ndarray:
        """1.0 on rows whose first-order term is the consistent SUPG term, else 0.0."""
        return (self.active_length == 0).astype(float)


def _row_systems(target, D, h, offset, what):
    target = sp.csr_matrix(target)
    Dd = [sp.csr_matrix(Dk) for Dk in D]
    N = target.shape[0]
    p = len(D) - 1
    coef = np.zeros((N, p))
    cond = np.full(N, np.nan)
    for i in range(N):
        r = min(p, N - 1 - i)
        if r == 0:
            continue
        cols = i + np.arange(1, r + 1)
        A = np.empty((r, r))
        for k in range(1, r + 1):
            A[:, k - 1] = h ** (2 * k - 1 + offset) * Dd[k][i, cols].toarray().ravel()
        rhs = -target[i, cols].toarray().ravel()
        c = np.linalg.cond(A)
        cond[i] = c
        if not np.isfinite(c) or c > MAX_CONDITION:
            raise StabilizationError(f"{what} system for row {i + 1} is numerically singular "
                                     f"(condition {c:.3e})")
        coef[i, :r] = np.linalg.solve(A, rhs)
    if np.any(np.isfinite(cond)):
        log.debug("%s systems: max condition %.3e", what, np.nanmax(cond))
    return coef, cond


def compute_tau(W, D: Sequence, h: float):
    """Solve the per-row systems that make ``W + NCSU`` lower triangular.

    For row ``i`` and ``l = 1..r``, ``r = min(p, N_t - i)``:
    ``W[i, i+l] + sum_k tau[i,k] h^(2k-1) D_k[i, i+l] = 0``.

    Returns ``(tau, cond)``.
    """
    return _row_systems(W, D, h, 0, "tau")


def compute_sigma(M, D: Sequence, h: float):
    """As :func:`compute_tau` for the mass matrix with ``h^(2k)`` scaling."""
    return _row_systems(M, D, h, 1, "sigma")


def compute_tables(blocks, with_sigma: bool = True) -> StabilizationTable:
    """Both coefficient tables from assembled :class:`SystemBlocks`."""
    tau, ct = compute_tau(blocks.W, blocks.D, blocks.h)
    sigma = cs = None
    if with_sigma:
        sigma, cs = compute_sigma(blocks.M, blocks.D, blocks.h)
    return StabilizationTable(tau=tau, h=blocks.h, cond_tau=ct, sigma=sigma, cond_sigma=cs)


def _weighted_sum(coef, D, h, offset):
    out = sp.csr_matrix(D[0].shape)
    for k in range(1, coef.shape[1] + 1):
        out = out + sp.diags(coef[:, k - 1] * h ** (2 * k - 1 + offset)) @ D[k]
    return out.tocsr()


def ncsu_matrix(table: StabilizationTable, D: Sequence) -> sp.csr_matrix:
    """``S[i, j] = sum_k tau[i,k] h^(2k-1) D_k[i, j]``."""
    return _weighted_sum(table.tau, D, table.h, 0)


def sigma_matrix(table: StabilizationTable, D: Sequence) -> sp.csr_matrix:
    """``sum_k sigma[i,k] h^(2k) D_k[i, j]``."""
    if table.sigma is None:
        raise ConfigurationError("sigma table not computed")
    return _weighted_sum(table.sigma, D, table.h, 1)


def su_time_factors(table: StabilizationTable, blocks):
    """Kronecker factors of the stabilized SU heat system at ``theta = 1``.

    Returns ``[(W_tilde, M_s), (M_tilde, K_s), (E, L_s)]``; every time
    factor is lower triangular.  ``E`` carries the consistent first-order
    term of the rows without upper triangle (nonzero in the last row only).
    """
    h = table.h
    tau = table.tau.copy()
    tau[:, 0] = table.first_order()
    Wt = (blocks.W + _weighted_sum(tau, blocks.D, h, 0)).tocsr()
    Mt = (blocks.M + sigma_matrix(table, blocks.D)).tocsr()
    E = (sp.diags(table.first_order() * h * table.fallback_rows) @ blocks.W.T).tocsr()
    return [(Wt, blocks.M_s), (Mt, blocks.K_s), (E, blocks.L_s)]


# ---------------------------------------------------------------------------
# shock indicator


class ThetaField:
    """Piecewise multilinear interpolant of nodal values on a breakpoint grid.

    ``axes`` lists the breakpoints of every direction (spatial parametric
    directions first, time last); ``values`` has one axis per direction.
    """

    def __init__(self, axes: Sequence[np.ndarray], values):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        values = np.asarray(values, dtype=float)
        if values.shape != tuple(a.size for a in self.axes):
            raise ValueError("theta values do not match the breakpoint grid")
        self.values = values
        self._hats = [knots_from_breakpoints(1, a) for a in self.axes]

    @classmethod
    def constant(cls, axes, value: float):
        axes = [np.asarray(a, dtype=float) for a in axes]
        return cls(axes, np.full(tuple(a.size for a in axes), float(value)))

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values.flat[0]))

    def _hat_matrix(self, l, x):
        from .splines import basis_matrix
        return basis_matrix(self._hats[l], x)

    def evaluate_grid(self, axes: Sequence[np.ndarray]) -> np.ndarray:
        """Values on the tensor grid of the given per-direction points."""
        out = self.values
        for l, x in enumerate(axes):
            H = self._hat_matrix(l, np.asarray(x, dtype=float))
            out = np.moveaxis(np.tensordot(H.toarray(), out, axes=([1], [l])), 0, l)
        return out

    def __call__(self, *coords) -> np.ndarray:
        """Scattered evaluation; one coordinate array per direction."""
        coords = [np.asarray(c, dtype=float) for c in coords]
        shape = np.broadcast_shapes(*(c.shape for c in coords))
        coords = [np.broadcast_to(c, shape).ravel() for c in coords]
        firsts, weights = [], []
        for l, c in enumerate(coords):
            spans, ders = basis_ders(self._hats[l], c, 0)
            firsts.append(spans - 1)
            weights.append(ders[:, 0, :])
        out = np.zeros(coords[0].size)
        D = len(coords)
        for corner in np.ndindex(*(2,) * D):
            w = np.ones_like(out)
            idx = []
            for l, c in enumerate(corner):
                w = w * weights[l][:, c]
                idx.append(firsts[l] + c)
            out += w * self.values[tuple(idx)]
        return out.reshape(shape)


def compute_theta(window_residuals, denominator: float, axes) -> ThetaField:
    """``theta = min(res / denominator, 1)`` at every breakpoint.

    A vanishing (or non-finite) denominator means no solution scale is
    available; the field is then identically 1.
    """
    res = np.asarray(window_residuals, dtype=float)
    if not np.isfinite(denominator) or denominator <= 0:
        return ThetaField.constant(axes, 1.0)
    return ThetaField(axes, np.minimum(res / denominator, 1.0))


def sample_axis(kv, extra=None):
    """Residual sampling points of one direction.

    Every cell receives ``p + 2`` equispaced points (endpoints included)
    plus its ``p + 1`` Gauss points.  Returns ``(points, cell_slices)``
    where ``cell_slices[c]`` selects the points in the closed cell ``c``.
    """
    p = kv.degree
    breaks = kv.breakpoints
    g, _ = np.polynomial.legendre.leggauss(p + 1)
    ref = np.unique(np.concatenate([np.linspace(0.0, 1.0, p + 2), (g + 1) / 2]))
    if extra is not None:
        ref = np.unique(np.concatenate([ref, extra]))
    a, b = breaks[:-1], breaks[1:]
    pts = (a[:, None] + (b - a)[:, None] * ref[None, :]).ravel()
    pts = np.unique(pts)
    lo = np.searchsorted(pts, a - 1e-14 * (b - a))
    hi = np.searchsorted(pts, b + 1e-14 * (b - a), side="right")
    return pts, [slice(int(i), int(j)) for i, j in zip(lo, hi)]


def window_max(values: np.ndarray, cell_slices: Sequence[Sequence[slice]]) -> np.ndarray:
    """Max over the breakpoint windows ``[zeta_{i-1}, zeta_{i+1}]`` (clamped).

    ``values`` lives on a tensor grid of sample points; ``cell_slices``
    gives, per axis, the sample range of every cell.  Returns an array
    over the breakpoint grid.
    """
    out = np.abs(values)
    for axis, slices in enumerate(cell_slices):
        cells = np.stack([np.take(out, np.arange(s.start, s.stop), axis=axis).max(axis=axis)
                          for s in slices], axis=axis)
        m = len(slices) + 1
        left = np.take(cells, np.clip(np.arange(m) - 1, 0, m - 2), axis=axis)
        right = np.take(cells, np.clip(np.arange(m), 0, m - 2), axis=axis)
        out = np.maximum(left, right)
    return out


def residual_field(disc, u):
    """Strong residual of ``u`` sampled on ``disc``'s residual grid.

    Returns a dict with the sample ``axes``, the per-axis ``cells``, the
    signed ``residual`` and the ``scale`` denominator
    ``T^{-1} ||u||_inf + ||d_t u||_inf``.
    """
    return disc.residual_samples(u)


def theta_from_solution(disc, u) -> ThetaField:
    """Shock indicator of the iterate ``u``."""
    samples = disc.residual_samples(u)
    res = window_max(samples["residual"], samples["cells"])
    return compute_theta(res, samples["scale"], disc.theta_axes())


# ---------------------------------------------------------------------------
# operators


def _row_scale(coef_column, h_power):
    return np.asarray(coef_column) * h_power


def su_operators(disc, table: StabilizationTable, theta: ThetaField):
    """Matrix and right-hand-side contributions of the SU stabilization.

    ``disc`` is a time-only or heat discretization.  Returns
    ``(matrix, rhs)``.
    """
    h = table.h
    p = table.degree
    first = table.first_order() * h
    if disc.is_heat:
        if table.sigma is None:
            raise ConfigurationError("SU for the heat equation needs the sigma table")
        return _su_heat(disc, table, theta, first)

    eps = disc.problem.epsilon
    th = disc.theta_at_quadrature(theta)
    fb = table.fallback_rows
    A = disc.weighted(1, 1, row_scale=first)
    if eps:
        A = A + disc.weighted(1, 2, coeff=-eps * (1.0 - th), row_scale=first * (1 - fb))
        A = A + disc.weighted(1, 2, coeff=-eps, row_scale=first * fb)
    for k in range(2, p + 1):
        A = A + disc.weighted(k, k, coeff=th, row_scale=_row_scale(table.tau[:, k - 1], h ** (2 * k - 1)))
    rhs = first * (1 - fb) * disc.load(time_deriv=1, weight=lambda axes, t: 1.0 - theta.evaluate_grid([t]))
    if fb.any():
        rhs = rhs + first * fb * disc.load(time_deriv=1)
    return A.tocsr(), rhs


def _su_heat(disc, table, theta, first):
    from .assembly import SpaceTimeTerm, assemble_spacetime, kron_matrix

    b = disc.blocks
    h, p = table.h, table.degree
    Ms, Ls, Ks = b.M_s, b.L_s, b.K_s
    fb = table.fallback_rows
    weighted_first = first * (1 - fb)
    pairs = [(sp.diags(first) @ b.D[1], Ms)]
    if fb.any():
        pairs.append((sp.diags(first * fb) @ b.W.T, Ls))
    if theta.is_constant:
        c = float(theta.values.flat[0])
        if c != 1.0:
            pairs.append(((1.0 - c) * (sp.diags(weighted_first) @ b.W.T), Ls))
        if c != 0.0:
            for k in range(2, p + 1):
                pairs.append((c * sp.diags(table.tau[:, k - 1] * h ** (2 * k - 1)) @ b.D[k], Ms))
            for k in range(1, p + 1):
                pairs.append((c * sp.diags(table.sigma[:, k - 1] * h ** (2 * k)) @ b.D[k], Ks))
        A = kron_matrix(pairs)
    else:
        A = kron_matrix(pairs)
        th = disc.theta_at_quadrature(theta)
        A = A + assemble_spacetime(disc.selem, disc.telem,
                                   [SpaceTimeTerm(1, 0, "value", "neg_laplacian", weighted_first)],
                                   coeff=1.0 - th)
        terms = [SpaceTimeTerm(k, k, "value", "value", table.tau[:, k - 1] * h ** (2 * k - 1))
                 for k in range(2, p + 1)]
        terms += [SpaceTimeTerm(k, k, "grad", "grad", table.sigma[:, k - 1] * h ** (2 * k))
                  for k in range(1, p + 1)]
        A = A + assemble_spacetime(disc.selem, disc.telem, terms, coeff=th)

    def weight(axes, t):
        return 1.0 - theta.evaluate_grid(list(axes) + [t])

    F = disc.load(time_deriv=1, weight=weight).reshape((disc.N_s, disc.N_t), order="F")
    F = F * weighted_first[None, :]
    if fb.any():
        F = F + disc.load(time_deriv=1).reshape((disc.N_s, disc.N_t), order="F") * (first * fb)[None, :]
    return A.tocsr(), F.ravel(order="F")


def supg_operators(disc, tau_supg: float | None = None):
    """Consistent SUPG term ``tau int (L u - f) d_t v``; returns ``(matrix, rhs)``.

    ``L u`` is ``u'`` (advection), ``u' - eps u''`` (advection-diffusion)
    or ``d_t u - Lap u`` (heat).  The default ``tau`` is ``h_t / 2``.
    """
    b = disc.blocks
    tau = b.h / 2 if tau_supg is None else float(tau_supg)
    if tau < 0:
        raise ParameterError("tau_SUPG must be nonnegative")
    if disc.is_heat:
        from .assembly import kron_matrix
        A = tau * kron_matrix([(b.D[1], b.M_s), (b.W.T, b.L_s)])
    else:
        A = tau * b.D[1]
        if disc.problem.epsilon:
            A = A + tau * disc.weighted(1, 2, coeff=-disc.problem.epsilon)
    rhs = tau * disc.load(time_deriv=1) if tau else np.zeros(A.shape[0])
    return A.tocsr(), rhs


def shock_capturing_operator(disc, u, u_ref: float, tau_sc: float | None = None):
    """Residual-based nonlinear diffusion ``int kappa u' v'``.

    ``kappa = tau_sc |u_h' - f| / u_ref`` at the quadrature points of the
    current iterate ``u``; the default ``tau_sc`` is ``h_t^2 / 4``.
    """
    if disc.is_heat:
        raise ConfigurationError("shock capturing is defined for the 1D advection problem only")
    if not u_ref > 0:
        raise ParameterError("u_ref must be positive")
    h = disc.blocks.h
    tau_sc = h * h / 4 if tau_sc is None else float(tau_sc)
    t = disc.telem.points.ravel()
    res = np.abs(disc.evaluate(u, t, 1) - disc.forcing(t))
    kappa = tau_sc * res / u_ref
    return disc.weighted(1, 1, coeff=kappa)


def write_table_csv(path, table: StabilizationTable, greville) -> None:
    """CSV with one row per ``(i, k)``: i, k, greville_i, tau, sigma, cond."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "k", "greville_i", "tau", "sigma", "cond"])
        r = table.active_length
        for i in range(table.N_t):
            for k in range(1, max(int(r[i]), 0) + 1):
                sigma = table.sigma[i, k - 1] if table.sigma is not None else float("nan")
                w.writerow([i + 1, k, repr(float(greville[i])), repr(float(table.tau[i, k - 1])),
                            repr(float(sigma)), repr(float(table.cond_tau[i]))])
