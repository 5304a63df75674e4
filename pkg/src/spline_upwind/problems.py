"""
Benchmark problems and solution evaluation.

Every problem has homogeneous data: ``u(0) = 0`` for advection,
``u(0) = u(T) = 0`` for advection-diffusion, and zero initial and
boundary values for the heat equation.  Forcings are vectorised
callables: ``f(t)`` for the one-dimensional problems and ``f(x, t)`` with
``x[..., l]`` the l-th physical coordinate for the heat equation.
"""
from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, ParameterError
from .geometry import GeometryMap, interval_map, quarter_annulus_map
from .splines import SplineSpace, basis_ders

__all__ = [
    "ProblemSpec",
    "smooth_advection_benchmark",
    "layered_advection_benchmark",
    "advection_diffusion_benchmark",
    "heat_interval_benchmark",
    "heat_annulus_benchmark",
    "custom_problem",
    "get_problem",
    "PROBLEMS",
    "parse_expression",
    "evaluate_solution",
]

KINDS = ("advection", "advdiff", "heat")


@dataclass(eq=False)
class ProblemSpec:
    name: str
    kind: str
    forcing: Callable
    T: float = 1.0
    exact: Callable | None = None
    exact_derivative: Callable | None = None
    epsilon: float = 0.0
    geometry: GeometryMap | None = None
    error_region: tuple | None = None
    source_window: tuple | None = None
    load_subdivisions: int = 1
    time_resolution: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown problem kind {self.kind!r}")
        if self.T <= 0:
            raise ParameterError("final time must be positive")
        if self.kind == "heat" and self.geometry is None:
            raise ParameterError("heat problems need a spatial geometry")
        if self.kind == "advdiff" and not self.epsilon > 0:
            raise ParameterError("advection-diffusion needs epsilon > 0")

    @property
    def is_heat(self) -> bool:
        return self.kind == "heat"

    @property
    def dim(self) -> int:
        return self.geometry.dim if self.is_heat else 0

    @property
    def time_drop(self) -> str:
        return "both" if self.kind == "advdiff" else "first"

    def strong_residual_exact(self, t, x=None):
        """Strong residual of the exact solution (time-only problems)."""
        if self.exact_derivative is None:
            raise ConfigurationError(f"problem {self.name!r} stores no exact derivative")
        return self.exact_derivative(t) - self.forcing(t)


def smooth_advection_benchmark() -> ProblemSpec:
    """``u' = 50 cos(50 t)`` on (0, 1); exact solution ``sin(50 t)``."""
    return ProblemSpec(
        name="smooth_advection", kind="advection", T=1.0,
        forcing=lambda t: 50.0 * np.cos(50.0 * np.asarray(t, dtype=float)),
        exact=lambda t: np.sin(50.0 * np.asarray(t, dtype=float)),
        exact_derivative=lambda t: 50.0 * np.cos(50.0 * np.asarray(t, dtype=float)),
    )


LAYERS = ((0.3, 10.0), (0.5, -5.0), (0.7, -5.0))
LAYER_WIDTH = 1e-3


def layered_advection_benchmark(delta: float = LAYER_WIDTH) -> ProblemSpec:
    """Smooth oscillation plus three tanh fronts of width ``delta``.

    The exact solution steps up by 10 at t=0.3 and down by 5 at t=0.5
    and t=0.7; errors are measured on [0.75, 1] where it is smooth again.
    """
    def exact(t):
        t = np.asarray(t, dtype=float)
        u = np.sin(50.0 * t)
        for t0, amp in LAYERS:
            u = u + amp * (1.0 + np.tanh((t - t0) / delta)) / 2.0
        return u

    def derivative(t):
        t = np.asarray(t, dtype=float)
        du = 50.0 * np.cos(50.0 * t)
        for t0, amp in LAYERS:
            du = du + amp / (2.0 * delta) * _sech2((t - t0) / delta)
        return du

    return ProblemSpec(
        name="layered_advection", kind="advection", T=1.0,
        forcing=derivative, exact=exact, exact_derivative=derivative,
        error_region=(0.75, 1.0), time_resolution=delta / 2, meta={"delta": delta, "layers": [t0 for t0, _ in LAYERS]},
    )


def _sech2(z):
    # overflow-free sech(z)^2
    e = np.exp(-2.0 * np.abs(z))
    return 4.0 * e / (1.0 + e) ** 2


def advection_diffusion_benchmark(epsilon: float = 1e-6) -> ProblemSpec:
    """``-eps u'' + u' = 1`` with ``u(0) = u(1) = 0``; outflow layer at t = 1."""
    return ProblemSpec(
        name="advdiff", kind="advdiff", T=1.0, epsilon=float(epsilon),
        forcing=lambda t: np.ones_like(np.asarray(t, dtype=float)),
    )


def _chi(t, a=0.3, b=0.6):
    t = np.asarray(t, dtype=float)
    return ((t >= a) & (t <= b)).astype(float)


def heat_interval_benchmark(delta: float = 1e-3) -> ProblemSpec:
    """Concentrated source oscillating across (0, 1), switched on for t in [0.3, 0.6]."""
    def forcing(x, t):
        x = np.asarray(x, dtype=float)[..., 0]
        t = np.asarray(t, dtype=float)
        centre = 0.25 * (np.sin(10.0 * np.pi * t) + 2.0)
        return delta ** -2 * np.exp(-(((x - centre) / delta) ** 2)) * _chi(t)

    return ProblemSpec(
        name="heat_interval", kind="heat", T=1.0, forcing=forcing,
        geometry=interval_map(0.0, 1.0), source_window=(0.3, 0.6),
        load_subdivisions=16, meta={"delta": delta},
    )


def heat_annulus_benchmark(delta: float = 0.1, r_in: float = 1.0, r_out: float = 2.0) -> ProblemSpec:
    """Gaussian source circling at radius 1.5 on the quarter annulus, on for t in [0.3, 0.6]."""
    def forcing(x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        cx = 1.5 * np.cos(np.pi / 2 * t)
        cy = 1.5 * np.sin(np.pi / 2 * t)
        r2 = ((x[..., 0] - cx) / delta) ** 2 + ((x[..., 1] - cy) / delta) ** 2
        return 1e3 / (2.0 * np.pi * delta ** 2) * np.exp(-0.5 * r2) * _chi(t)

    a = r_in / math.sqrt(2.0)
    b = r_out / math.sqrt(2.0)
    return ProblemSpec(
        name="heat_annulus", kind="heat", T=1.0, forcing=forcing,
        geometry=quarter_annulus_map(r_in, r_out), source_window=(0.3, 0.6),
        meta={"delta": delta, "section": [[a, a], [b, b]]},
    )


# ---------------------------------------------------------------------------
# expression grammar for custom problems

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh,
    "sech": lambda z: 1.0 / np.cosh(z),
    "step": lambda z: (np.asarray(z) >= 0).astype(float),
    "chi": lambda z, a, b: ((np.asarray(z) >= a) & (np.asarray(z) <= b)).astype(float),
    "min": np.minimum, "max": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}

EXPRESSION_HELP = (
    "Expressions use numbers, + - * / ** and parentheses, the variables "
    "t, x (alias x1) and y (alias x2), the constants pi and e, and the "
    "functions " + ", ".join(sorted(_FUNCS)) + ". chi(t, a, b) is the "
    "indicator of [a, b]; step(z) is 1 for z >= 0."
)


def parse_expression(text: str, variables=("t",)) -> Callable:
    """Compile an arithmetic expression into a vectorised function.

    The returned callable takes the variables positionally in the order
    given by ``variables``.  Anything outside the grammar raises
    :class:`ConfigurationError`.
    """
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {text!r}: {exc.msg}") from None
    aliases = {"x1": "x", "x2": "y"}
    allowed = set(variables) | {aliases.get(v, v) for v in variables} | {
        k for k, v in aliases.items() if v in variables}

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return
        if isinstance(node, ast.Name):
            if node.id not in allowed and node.id not in _CONSTS:
                raise ConfigurationError(f"unknown name {node.id!r} in expression {text!r}")
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            check(node.operand)
            return
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and not node.keywords:
            for a in node.args:
                check(a)
            return
        raise ConfigurationError(f"unsupported construct in expression {text!r}")

    check(tree)

    def ev(node, env):
        if isinstance(node, ast.Expression):
            return ev(node.body, env)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](ev(node.operand, env))
        return _FUNCS[node.func.id](*(ev(a, env) for a in node.args))

    def fn(*args):
        env = {}
        for name, value in zip(variables, args):
            value = np.asarray(value, dtype=float)
            env[name] = value
            env[aliases.get(name, name)] = value
            for k, v in aliases.items():
                if v == name:
                    env[k] = value
        # non-finite values are reported by the callers with their location
        with np.errstate(all="ignore"):
            out = ev(tree, env)
        shape = np.broadcast_shapes(*(np.shape(a) for a in args)) if args else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    fn.expression = text
    return fn


def custom_problem(kind: str, forcing: str, exact: str | None = None, epsilon: float = 0.0,
                   T: float = 1.0, geometry: str = "interval", error_region=None,
                   r_in: float = 1.0, r_out: float = 2.0, load_subdivisions: int = 1,
                   time_resolution: float | None = None) -> ProblemSpec:
    """Problem from expression strings (see ``EXPRESSION_HELP``).

    ``load_subdivisions`` splits every spatial span for the load quadrature
    and ``time_resolution`` caps the length of the time quadrature cells;
    both matter for narrow sources.
    """
    if kind == "heat":
        if geometry == "interval":
            gmap = interval_map(0.0, 1.0)
            f1 = parse_expression(forcing, ("x", "t"))

            def f(x, t):
                return f1(np.asarray(x)[..., 0], t)
        elif geometry == "quarter_annulus":
            gmap = quarter_annulus_map(r_in, r_out)
            f2 = parse_expression(forcing, ("x", "y", "t"))

            def f(x, t):
                x = np.asarray(x)
                return f2(x[..., 0], x[..., 1], t)
        else:
            raise ConfigurationError(f"unknown geometry {geometry!r}")
        return ProblemSpec(name="custom", kind="heat", forcing=f, T=T, geometry=gmap,
                           load_subdivisions=load_subdivisions, time_resolution=time_resolution,
                           meta={"forcing": forcing, "geometry": geometry})
    u = parse_expression(exact, ("t",)) if exact else None
    return ProblemSpec(name="custom", kind=kind, forcing=parse_expression(forcing, ("t",)), T=T,
                       exact=u, epsilon=epsilon, time_resolution=time_resolution,
                       error_region=tuple(error_region) if error_region else None,
                       meta={"forcing": forcing, "exact": exact})


PROBLEMS = {
    "smooth_advection": smooth_advection_benchmark,
    "layered_advection": layered_advection_benchmark,
    "advdiff": advection_diffusion_benchmark,
    "heat_interval": heat_interval_benchmark,
    "heat_annulus": heat_annulus_benchmark,
}


def get_problem(name: str, **options) -> ProblemSpec:
    if name == "custom":
        return custom_problem(**options)
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(f"unknown problem {name!r}; choose from "
                                 f"{', '.join(list(PROBLEMS) + ['custom'])}") from None
    return factory(**options)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_solution(coefficients, time_space: SplineSpace, points,
                      spatial_spaces=None, gmap: GeometryMap | None = None):
    """Evaluate a spline field and its derivatives at scattered points.

    Parameters
    ----------
    coefficients : array_like
        Constrained coefficients, colex ordered (space fastest).
    points :
        Time-only: array of times.  Space-time: tuple ``(eta, t)`` with
        ``eta`` of shape ``(N, d)`` (parametric) and ``t`` of shape ``(N,)``.

    Returns
    -------
    dict
        ``value``, ``dt``, ``dtt`` for time-only fields; ``value``, ``dt``,
        ``grad`` (physical, ``(N, d)``), ``laplacian`` and ``x`` (physical
        points) for space-time fields.
    """
    u = np.asarray(coefficients, dtype=float)
    if not spatial_spaces:
        t = np.atleast_1d(np.asarray(points, dtype=float))
        ufull = time_space.expand(u)
        p = time_space.degree
        spans, ders = basis_ders(time_space.knots, t, 2)
        idx = spans[:, None] - p + np.arange(p + 1)
        c = ufull[idx]
        return {"value": np.einsum("na,na->n", ders[:, 0], c),
                "dt": np.einsum("na,na->n", ders[:, 1], c),
                "dtt": np.einsum("na,na->n", ders[:, 2], c)}

    eta, t = points
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    d = len(spatial_spaces)
    if eta.shape[-1] != d:
        eta = eta.reshape(-1, d)
    if np.any(eta < -1e-12) or np.any(eta > 1 + 1e-12):
        raise DomainError("parametric point outside the unit cube")
    shape = tuple(s.dim for s in spatial_spaces) + (time_space.dim,)
    U = u.reshape(shape, order="F")
    for l, s in enumerate(spatial_spaces):
        U = np.moveaxis(s.expand(np.moveaxis(U, l, -1)), -1, l)
    U = time_space.expand(U)
    spans_t, bt = basis_ders(time_space.knots, t, 1)
    it = spans_t[:, None] - time_space.degree + np.arange(time_space.degree + 1)
    sdat = []
    for l, s in enumerate(spatial_spaces):
        sl, bl = basis_ders(s.knots, eta[:, l], 2)
        sdat.append((sl[:, None] - s.degree + np.arange(s.degree + 1), bl))
    N = t.size
    if d == 1:
        (i1, b1), = sdat
        C = U[i1[:, :, None], it[:, None, :]]  # (N, A1, At)

        def comb(k1, kt):
            return np.einsum("na,nb,nab->n", b1[:, k1], bt[:, kt], C)
        g_eta = comb(1, 0)[:, None]
        h_eta = comb(2, 0)[:, None, None]
        value, dt = comb(0, 0), comb(0, 1)
    else:
        (i1, b1), (i2, b2) = sdat
        C = U[i1[:, :, None, None], i2[:, None, :, None], it[:, None, None, :]]

        def comb(k1, k2, kt):
            return np.einsum("na,nb,nc,nabc->n", b1[:, k1], b2[:, k2], bt[:, kt], C)
        g_eta = np.stack([comb(1, 0, 0), comb(0, 1, 0)], axis=-1)
        h12 = comb(1, 1, 0)
        h_eta = np.empty((N, 2, 2))
        h_eta[:, 0, 0] = comb(2, 0, 0)
        h_eta[:, 1, 1] = comb(0, 2, 0)
        h_eta[:, 0, 1] = h_eta[:, 1, 0] = h12
        value, dt = comb(0, 0, 0), comb(0, 0, 1)
    from .geometry import push_forward_derivatives
    grad, lap = push_forward_derivatives(gmap, eta, g_eta, h_eta)
    return {"value": value, "dt": dt, "grad": grad, "laplacian": lap, "x": gmap.evaluate(eta)}
