"""
Parametric-to-physical geometry maps.

A map ``F`` sends the unit cube ``(0,1)^d`` onto the spatial domain.  All
evaluation routines are vectorised over a leading batch of points; the
parametric coordinate is always the last axis.

Conventions: ``J[..., k, a] = dF_k / d eta_a`` and
``H[..., k, a, b] = d^2 F_k / (d eta_a d eta_b)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, GeometryError, ParameterError

__all__ = [
    "GeometryMap",
    "interval_map",
    "quarter_annulus_map",
    "push_forward_derivatives",
    "laplacian_coefficients",
]


@dataclass(frozen=True, eq=False)
class GeometryMap:
    """Spatial map with analytic first and second derivatives.

    The space-time map is ``G(eta, tau) = (F(eta), T tau)``; time is
    handled directly in physical units by the time knot vector, so only
    ``F`` is represented here.
    """

    dim: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    name: str = "map"
    affine: bool = False
    params: dict | None = None

    def __call__(self, eta):
        return self.evaluate(self._points(eta))

    def _points(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.dim == 1 and (eta.ndim == 0 or eta.shape[-1] != 1):
            eta = eta[..., None]
        return eta

    def det_jacobian(self, eta) -> np.ndarray:
        return np.linalg.det(self.jacobian(self._points(eta)))

    def inverse(self, x, tol=1e-13, max_iter=50, strict: bool = True):
        """Parametric preimage of physical points by damped Newton iteration.

        With ``strict=False`` points outside the domain do not raise; the
        clipped preimages are returned together with a boolean mask of the
        points that lie inside.
        """
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        eta = np.full(x.shape, 0.5)
        for _ in range(max_iter):
            r = self.evaluate(eta) - x
            if np.max(np.abs(r), initial=0.0) < tol:
                break
            step = np.linalg.solve(self.jacobian(eta), r[..., None])[..., 0]
            eta = np.clip(eta - step, -0.5, 1.5)
        inside = np.all((eta >= -1e-10) & (eta <= 1 + 1e-10), axis=-1)
        inside &= np.all(np.abs(self.evaluate(np.clip(eta, 0.0, 1.0)) - x) <= 1e-8 * (1 + np.abs(x)), axis=-1)
        if not strict:
            return np.clip(eta, 0.0, 1.0), inside
        if not np.all(inside):
            raise DomainError("point lies outside the mapped domain")
        return np.clip(eta, 0.0, 1.0)


def interval_map(a: float, b: float) -> GeometryMap:
    """Affine map ``eta -> a + (b - a) eta`` of the unit interval."""
    a, b = float(a), float(b)
    if not a < b:
        raise ParameterError(f"interval_map needs a < b, got ({a}, {b})")
    length = b - a

    def evaluate(eta):
        return a + length * eta

    def jacobian(eta):
        return np.full(eta.shape[:-1] + (1, 1), length)

    def hessian(eta):
        return np.zeros(eta.shape[:-1] + (1, 1, 1))

    return GeometryMap(1, evaluate, jacobian, hessian, name="interval",
                       affine=True, params={"a": a, "b": b})


def quarter_annulus_map(r_in: float = 1.0, r_out: float = 2.0) -> GeometryMap:
    """Exact rational map of the unit square onto the first-quadrant quarter annulus.

    ``eta_1`` is the radial direction (``r = r_in + (r_out - r_in) eta_1``);
    ``eta_2`` runs from angle 0 to pi/2 along the rational quadratic
    circle with weights ``(1, 1/sqrt(2), 1)``.
    """
    r_in, r_out = float(r_in), float(r_out)
    if not 0 < r_in < r_out:
        raise ParameterError(f"quarter annulus needs 0 < r_in < r_out, got ({r_in}, {r_out})")
    dr = r_out - r_in
    w = np.sqrt(0.5)
    ctrl = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    weights = np.array([1.0, w, 1.0])

    def arc(s):
        # unit quarter circle P(s) with first and second derivatives
        s = s[..., None]
        bern = [(1 - s) ** 2, 2 * s * (1 - s), s ** 2]
        dbern = [-2 * (1 - s), 2 - 4 * s, 2 * s]
        ddbern = [2.0 + 0 * s, -4.0 + 0 * s, 2.0 + 0 * s]
        num = sum(wi * bi * ci for wi, bi, ci in zip(weights, bern, ctrl))
        dnum = sum(wi * bi * ci for wi, bi, ci in zip(weights, dbern, ctrl))
        ddnum = sum(wi * bi * ci for wi, bi, ci in zip(weights, ddbern, ctrl))
        den = sum(wi * bi for wi, bi in zip(weights, bern))
        dden = sum(wi * bi for wi, bi in zip(weights, dbern))
        ddden = sum(wi * bi for wi, bi in zip(weights, ddbern))
        P = num / den
        dP = (dnum - P * dden) / den
        ddP = (ddnum - 2 * dP * dden - P * ddden) / den
        return P, dP, ddP

    def evaluate(eta):
        r = r_in + dr * eta[..., 0]
        P, _, _ = arc(eta[..., 1])
        return r[..., None] * P

    def jacobian(eta):
        r = r_in + dr * eta[..., 0]
        P, dP, _ = arc(eta[..., 1])
        return np.stack([dr * P, r[..., None] * dP], axis=-1)

    def hessian(eta):
        r = r_in + dr * eta[..., 0]
        _, dP, ddP = arc(eta[..., 1])
        H = np.zeros(eta.shape[:-1] + (2, 2, 2))
        H[..., :, 0, 1] = dr * dP
        H[..., :, 1, 0] = dr * dP
        H[..., :, 1, 1] = r[..., None] * ddP
        return H

    return GeometryMap(2, evaluate, jacobian, hessian, name="quarter_annulus",
                       params={"r_in": r_in, "r_out": r_out})


def laplacian_coefficients(J, H):
    """Coefficients of the physical Laplacian in parametric derivatives.

    For ``u(F(eta)) = v(eta)``,
    ``Lap_x u = sum_ab A_ab d_ab v + sum_a c_a d_a v`` with
    ``A = J^{-1} J^{-T}`` and ``c_a = -sum_k Jinv_ak tr(A H_k)``.

    Returns ``(Jinv, A, c)``.
    """
    det = np.linalg.det(J)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-300):
        bad = int(np.argmin(np.abs(np.nan_to_num(det, nan=0.0)).ravel()))
        raise GeometryError(f"singular Jacobian at quadrature point {bad}")
    Jinv = np.linalg.inv(J)
    A = Jinv @ np.swapaxes(Jinv, -1, -2)
    L = np.einsum("...ab,...kab->...k", A, H)
    c = -np.einsum("...ak,...k->...a", Jinv, L)
    return Jinv, A, c


def push_forward_derivatives(gmap: GeometryMap, eta, basis_grad, basis_hess):
    """Physical gradient and Laplacian from parametric derivatives.

    The gradient is ``J^{-T} grad_eta``; the Laplacian is the trace of
    ``J^{-T} (Hess_eta - sum_k (grad_x)_k H_k) J^{-1}``.  Inputs broadcast
    over leading axes.
    """
    eta = gmap._points(eta)
    J = gmap.jacobian(eta)
    H = gmap.hessian(eta)
    g = np.asarray(basis_grad, dtype=float)
    Hb = np.asarray(basis_hess, dtype=float)
    if gmap.dim == 1:
        g = g.reshape(g.shape[:-1] + (1,)) if g.ndim else g.reshape(1)
        Hb = Hb.reshape(Hb.shape[:-2] + (1, 1)) if Hb.ndim >= 2 else Hb.reshape(1, 1)
    Jinv, A, c = laplacian_coefficients(J, H)
    grad_x = np.einsum("...ak,...a->...k", Jinv, g)
    lap = np.einsum("...ab,...ab->...", A, Hb) + np.einsum("...a,...a->...", c, g)
    return grad_x, lap
