"""
Error norms, oscillation indicators and convergence rates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError
from .splines import KnotVector

__all__ = [
    "l2_norm",
    "relative_l2_error",
    "overshoot_indicator",
    "overshoot_from_samples",
    "sample_points",
    "ConvergenceRecord",
    "estimate_orders",
    "fitted_order",
    "write_convergence_csv",
    "CONVERGENCE_COLUMNS",
]

CONVERGENCE_COLUMNS = ("degree", "h", "N_dof", "error", "order", "wall_time_s")
ZERO_ERROR = 1e-13


def _clipped_spans(knots: KnotVector, region=None):
    brk = knots.breakpoints
    a, b = brk[:-1], brk[1:]
    if region is not None:
        lo, hi = map(float, region)
        if not lo < hi:
            raise ParameterError(f"empty region {region}")
        a, b = np.maximum(a, lo), np.minimum(b, hi)
        keep = b > a
        a, b = a[keep], b[keep]
        if a.size == 0:
            raise ParameterError(f"region {region} does not meet the mesh")
    return a, b


def _quadrature(knots: KnotVector, region, q):
    a, b = _clipped_spans(knots, region)
    x, w = np.polynomial.legendre.leggauss(q)
    half = (b - a)[:, None] / 2
    pts = (a[:, None] + b[:, None]) / 2 + half * x[None, :]
    return pts.ravel(), (half * w[None, :]).ravel()


def l2_norm(func: Callable, knots: KnotVector, region=None, q: int | None = None) -> float:
    """``||func||_{L2(region)}`` with ``q`` (default ``p + 2``) Gauss points per span."""
    t, w = _quadrature(knots, region, q or knots.degree + 2)
    return float(np.sqrt(np.sum(w * np.asarray(func(t), dtype=float) ** 2)))


def relative_l2_error(u_h: Callable, u_ex: Callable, knots: KnotVector, region=None,
                      q: int | None = None) -> float:
    """``||u_h - u_ex|| / ||u_ex||`` in ``L2(region)``.

    Spans partly inside ``region`` are integrated over the intersection
    only.  Both functions are vectorised callables of time.
    """
    t, w = _quadrature(knots, region, q or knots.degree + 2)
    ex = np.asarray(u_ex(t), dtype=float)
    den = np.sqrt(np.sum(w * ex ** 2))
    if not den > 0:
        raise ParameterError("exact solution has zero norm on the region")
    num = np.sqrt(np.sum(w * (np.asarray(u_h(t), dtype=float) - ex) ** 2))
    return float(num / den)


def sample_points(knots: KnotVector, region=None, per_cell: int | None = None) -> np.ndarray:
    """``per_cell`` (default ``p + 2``) equispaced points per (clipped) span, endpoints included."""
    a, b = _clipped_spans(knots, region)
    m = per_cell or knots.degree + 2
    s = np.linspace(0.0, 1.0, m)
    return np.unique((a[:, None] + (b - a)[:, None] * s[None, :]).ravel())


def overshoot_from_samples(uh_values, uex_values) -> float:
    """``max(0, max u_h - max u_ex) + max(0, min u_ex - min u_h)``."""
    uh = np.asarray(uh_values, dtype=float)
    ue = np.asarray(uex_values, dtype=float)
    return float(max(0.0, uh.max() - ue.max()) + max(0.0, ue.min() - uh.min()))


def overshoot_indicator(u_h: Callable, u_ex: Callable, knots: KnotVector, region=None,
                        per_cell: int | None = None) -> float:
    """Amount by which ``u_h`` leaves the range of ``u_ex`` on ``region``, sampled per cell."""
    t = sample_points(knots, region, per_cell)
    return overshoot_from_samples(u_h(t), u_ex(t))


@dataclass
class ConvergenceRecord:
    """Errors of one degree on a sequence of meshes.

    ``orders[i]`` is the rate between levels ``i`` and ``i + 1``;
    ``undefined[i]`` flags rates that could not be formed because an
    error vanished (the rate is then ``nan``).
    """

    degree: int | None
    h: np.ndarray
    errors: np.ndarray
    orders: np.ndarray
    undefined: np.ndarray
    num_dofs: list | None = None
    wall_times: list | None = None
    meta: dict = field(default_factory=dict)

    def fitted_order(self, last: int = 3) -> float:
        return fitted_order(self.h, self.errors, last)


def estimate_orders(h: Sequence[float], errors: Sequence[float], degree: int | None = None,
                    num_dofs=None, wall_times=None) -> ConvergenceRecord:
    """Pairwise rates ``log(e_i / e_{i+1}) / log(h_i / h_{i+1})``.

    Raises :class:`~spline_upwind.errors.ParameterError` for fewer than two
    levels or mesh sizes that are not strictly decreasing.
    """
    h = np.asarray(h, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.ndim != 1 or h.shape != e.shape:
        raise ParameterError("h and errors must be 1D arrays of equal length")
    if h.size < 2:
        raise ParameterError("at least two levels are needed to estimate orders")
    if np.any(np.diff(h) >= 0) or np.any(h <= 0):
        raise ParameterError("mesh sizes must be positive and strictly decreasing")
    bad = (e[:-1] <= ZERO_ERROR) | (e[1:] <= ZERO_ERROR) | ~np.isfinite(e[:-1]) | ~np.isfinite(e[1:])
    with np.errstate(divide="ignore", invalid="ignore"):
        orders = np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])
    orders[bad] = np.nan
    return ConvergenceRecord(degree=degree, h=h, errors=e, orders=orders, undefined=bad,
                             num_dofs=None if num_dofs is None else list(num_dofs),
                             wall_times=None if wall_times is None else list(wall_times))


def fitted_order(h, errors, last: int = 3) -> float:
    """Least-squares slope of ``log e`` against ``log h`` over the last ``last`` levels."""
    h = np.asarray(h, dtype=float)[-last:]
    e = np.asarray(errors, dtype=float)[-last:]
    if h.size < 2:
        raise ParameterError("at least two levels are needed to fit an order")
    if np.any(e <= 0):
        return float("nan")
    slope, _ = np.polyfit(np.log(h), np.log(e), 1)
    return float(slope)


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def write_convergence_csv(path, records: Sequence[ConvergenceRecord],
                          include_times: bool = False) -> None:
    """One row per (degree, level); ``order`` is empty on the first level.

    ``wall_time_s`` stays empty unless ``include_times`` is set, so that
    repeated runs give byte-identical files.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_COLUMNS)
        for rec in records:
            for i, (h, e) in enumerate(zip(rec.h, rec.errors)):
                order = "" if i == 0 else _fmt(rec.orders[i - 1])
                ndof = "" if rec.num_dofs is None else int(rec.num_dofs[i])
                wt = _fmt(rec.wall_times[i]) if include_times and rec.wall_times else ""
                w.writerow(["" if rec.degree is None else rec.degree, _fmt(h), ndof, _fmt(e),
                            order, wt])
