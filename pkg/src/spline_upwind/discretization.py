"""
Discrete spaces for the benchmark problems.

:class:`TimeDiscretization` covers the one-dimensional advection and
advection-diffusion problems (time is the only variable);
:class:`HeatDiscretization` the space-time heat equation.  Both expose the
same small interface used by :mod:`spline_upwind.stabilization` and
:mod:`spline_upwind.solver`: assembled ``blocks``, the coefficient
``table``, ``load``, theta evaluation at quadrature points and residual
sampling.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .assembly import (SpatialElements, SystemBlocks, UnivariateElements, assemble_load,
                       gauss_rule)
from .errors import ParameterError
from .geometry import laplacian_coefficients
from .problems import ProblemSpec
from .splines import SplineSpace, basis_matrix, greville_abscissae, make_open_uniform_knots
from .stabilization import StabilizationTable, compute_tables, sample_axis

__all__ = ["TimeDiscretization", "HeatDiscretization", "make_discretization"]


class TimeDiscretization:
    """Splines of degree ``degree`` on ``elements`` uniform spans of ``[0, T]``."""

    is_heat = False

    def __init__(self, problem: ProblemSpec, degree: int, elements: int,
                 points_per_span: int | None = None):
        if problem.is_heat:
            raise ParameterError("use HeatDiscretization for the heat equation")
        self.problem = problem
        self.degree = int(degree)
        self.elements = int(elements)
        self.knots = make_open_uniform_knots(self.degree, self.elements, (0.0, problem.T))
        self.space = SplineSpace(self.knots, problem.time_drop)
        q = points_per_span or self.degree + 1
        self.telem = UnivariateElements(self.space, gauss_rule(self.knots, q), max(self.degree, 2))
        self.blocks = SystemBlocks.from_spaces(self.space)

    @property
    def h(self) -> float:
        return self.knots.h

    @property
    def N_t(self) -> int:
        return self.space.dim

    N_s = 1

    @property
    def num_dofs(self) -> int:
        return self.space.dim

    @cached_property
    def table(self) -> StabilizationTable:
        """Upwind coefficients of the causal (initial-value) time space.

        With an outflow condition ``u(T) = 0`` the coefficients are computed
        with only the first function removed and then restricted to the
        rows of the constrained space: the dropped last function is a
        column outside the causal system, not a reason to shorten the
        upwind stencil of its neighbours.
        """
        if self.problem.time_drop == "first":
            return compute_tables(self.blocks, with_sigma=True)
        causal = SplineSpace.time(self.knots)
        full = compute_tables(SystemBlocks.from_spaces(causal), with_sigma=True)
        rows = np.searchsorted(causal.active, self.space.active)
        return full.restrict(rows)

    @cached_property
    def greville(self) -> np.ndarray:
        return greville_abscissae(self.knots)[self.space.active]

    def forcing(self, t):
        return self.problem.forcing(t)

    def weighted(self, test_deriv: int, trial_deriv: int, coeff=None, row_scale=None):
        """``R[i] * int c b_i^(test) b_j^(trial)`` with ``c`` given at the quadrature points."""
        w = self.telem.weights.ravel()
        if coeff is not None:
            w = w * np.broadcast_to(np.asarray(coeff, dtype=float), w.shape)
        T = self.telem.collocation(test_deriv)
        R = self.telem.collocation(trial_deriv)
        A = T.T @ sp.diags(w) @ R
        if row_scale is not None:
            A = sp.diags(np.asarray(row_scale, dtype=float)) @ A
        return A.tocsr()

    def galerkin_matrix(self):
        A = self.blocks.W
        if self.problem.epsilon:
            A = A + self.problem.epsilon * self.blocks.D[1]
        return A.tocsr()

    def load(self, time_deriv: int = 0, weight=None):
        return assemble_load([], None, self.problem.forcing, self.space,
                             time_deriv=time_deriv, weight=weight,
                             time_subdivisions=self.time_subdivisions)

    @property
    def time_subdivisions(self) -> int:
        res = self.problem.time_resolution
        return 1 if not res else max(1, int(np.ceil(self.h / res)))

    def theta_axes(self):
        return [self.knots.breakpoints]

    def theta_at_quadrature(self, theta):
        return theta.evaluate_grid([self.telem.points.ravel()])

    def evaluate(self, u, t, deriv: int = 0):
        B = basis_matrix(self.knots, t, deriv, self.space)
        return B @ np.asarray(u, dtype=float)

    def function(self, u, deriv: int = 0):
        """Vectorised callable ``t -> u_h^(deriv)(t)``."""
        u = np.asarray(u, dtype=float).copy()
        return lambda t: self.evaluate(u, np.atleast_1d(t), deriv)

    def residual_samples(self, u):
        t, cells = sample_axis(self.knots)
        val = self.evaluate(u, t, 0)
        d1 = self.evaluate(u, t, 1)
        res = d1 - self.problem.forcing(t)
        if self.problem.epsilon:
            res = res - self.problem.epsilon * self.evaluate(u, t, 2)
        scale = np.max(np.abs(val)) / self.problem.T + np.max(np.abs(d1))
        return {"axes": [t], "cells": [cells], "residual": res, "scale": float(scale),
                "value": val, "dt": d1}


class HeatDiscretization:
    """Tensor splines of one degree in all directions, ``h_s = h_t`` by default.

    ``elements`` is the number of spans per spatial direction and
    ``time_elements`` (default: ``elements``) the number of time spans.
    """

    is_heat = True

    def __init__(self, problem: ProblemSpec, degree: int, elements: int,
                 time_elements: int | None = None, points_per_span: int | None = None):
        if not problem.is_heat:
            raise ParameterError("HeatDiscretization needs a heat problem")
        self.problem = problem
        self.degree = p = int(degree)
        self.elements = int(elements)
        self.time_elements = int(time_elements or elements)
        d = problem.dim
        self.space_knots = [make_open_uniform_knots(p, self.elements) for _ in range(d)]
        self.spaces = [SplineSpace.dirichlet(kv) for kv in self.space_knots]
        self.knots = make_open_uniform_knots(p, self.time_elements, (0.0, problem.T))
        self.space = SplineSpace.time(self.knots)
        q = points_per_span or p + 1
        self.selem = SpatialElements(self.spaces, problem.geometry, q)
        self.telem = UnivariateElements(self.space, gauss_rule(self.knots, q), p)
        self.blocks = SystemBlocks.from_spaces(self.space, self.selem)

    @property
    def h(self) -> float:
        return self.knots.h

    @property
    def N_t(self) -> int:
        return self.space.dim

    @property
    def N_s(self) -> int:
        return self.selem.num_dofs

    @property
    def num_dofs(self) -> int:
        return self.N_s * self.N_t

    @property
    def dim(self) -> int:
        return self.problem.dim

    @cached_property
    def table(self) -> StabilizationTable:
        return compute_tables(self.blocks, with_sigma=True)

    @cached_property
    def greville(self) -> np.ndarray:
        return greville_abscissae(self.knots)[self.space.active]

    def galerkin_pairs(self):
        return self.blocks.galerkin_pairs()

    def load(self, time_deriv: int = 0, weight=None):
        return assemble_load(self.spaces, self.problem.geometry, self.problem.forcing, self.space,
                             time_deriv=time_deriv, weight=weight,
                             space_subdivisions=self.problem.load_subdivisions,
                             time_subdivisions=self.time_subdivisions)

    @property
    def time_subdivisions(self) -> int:
        res = self.problem.time_resolution
        return 1 if not res else max(1, int(np.ceil(self.h / res)))

    def theta_axes(self):
        return [kv.breakpoints for kv in self.space_knots] + [self.knots.breakpoints]

    def theta_at_quadrature(self, theta):
        grid = theta.evaluate_grid(self.selem.axis_points() + [self.telem.points.ravel()])
        cells = self.selem.to_cells(grid)
        C, Qs = cells.shape[:2]
        return cells.reshape(C, Qs, *self.telem.points.shape)

    def coefficient_tensor(self, u):
        """Coefficients on the full (unconstrained) tensor basis, shape ``(n_1, .., n_t)``."""
        shape = tuple(s.dim for s in self.spaces) + (self.space.dim,)
        U = np.asarray(u, dtype=float).reshape(shape, order="F")
        for l, s in enumerate(self.spaces + [self.space]):
            U = np.moveaxis(s.expand(np.moveaxis(U, l, -1)), -1, l)
        return U

    def grid_fields(self, u, axes, t, laplacian: bool = True):
        """Solution fields on the tensor grid ``axes[0] x .. x t`` (parametric space)."""
        U = self.coefficient_tensor(u)
        d = self.dim
        mats = {}

        def B(l, k):
            key = (l, k)
            if key not in mats:
                kv = self.space_knots[l] if l < d else self.knots
                pts = axes[l] if l < d else t
                mats[key] = basis_matrix(kv, pts, k)
            return mats[key]

        def field(orders):
            out = U
            for l, k in enumerate(orders):
                out = np.moveaxis(_contract(B(l, k), out, l), 0, l)
            return out

        zero = (0,) * d
        out = {"value": field(zero + (0,)), "dt": field(zero + (1,))}
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        out["x"] = self.problem.geometry.evaluate(mesh)
        if laplacian:
            gmap = self.problem.geometry
            J = gmap.jacobian(mesh)
            H = gmap.hessian(mesh)
            _, A, c = laplacian_coefficients(J, H)
            lap = np.zeros_like(out["value"])
            for a in range(d):
                first = [0] * d
                first[a] = 1
                lap += c[..., a, None] * field(tuple(first) + (0,))
                for b in range(a, d):
                    second = [0] * d
                    second[a] += 1
                    second[b] += 1
                    fac = 1.0 if a == b else 2.0
                    lap += fac * A[..., a, b, None] * field(tuple(second) + (0,))
            out["laplacian"] = lap
        return out

    def forcing_grid(self, x, t):
        d = self.dim
        vals = self.problem.forcing(x[..., None, :], np.asarray(t).reshape((1,) * d + (-1,)))
        return np.broadcast_to(vals, x.shape[:-1] + (np.size(t),))

    def residual_samples(self, u):
        pairs = [sample_axis(kv) for kv in self.space_knots + [self.knots]]
        axes = [a for a, _ in pairs]
        fields = self.grid_fields(u, axes[:-1], axes[-1])
        res = fields["dt"] - fields["laplacian"] - self.forcing_grid(fields["x"], axes[-1])
        scale = np.max(np.abs(fields["value"])) / self.problem.T + np.max(np.abs(fields["dt"]))
        return {"axes": axes, "cells": [c for _, c in pairs], "residual": res,
                "scale": float(scale), "value": fields["value"], "dt": fields["dt"]}


def _contract(B, G, axis):
    Gm = np.moveaxis(G, axis, 0)
    shape = Gm.shape
    out = B @ Gm.reshape(shape[0], -1)
    return np.asarray(out).reshape((B.shape[0],) + shape[1:])


def make_discretization(problem: ProblemSpec, degree: int, elements: int, **kwargs):
    if problem.is_heat:
        return HeatDiscretization(problem, degree, elements, **kwargs)
    kwargs.pop("time_elements", None)
    return TimeDiscretization(problem, degree, elements, **kwargs)
