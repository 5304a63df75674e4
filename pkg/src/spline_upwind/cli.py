"""
Command-line experiment runner.

Subcommands
-----------
run
    Solve one problem and write sampled solutions, errors, the theta field,
    the upwind coefficient table and a manifest.
convergence
    Errors and rates over several degrees and mesh levels.
dump-stab
    Upwind coefficient tables of a time mesh.

Configuration comes from a JSON file (``--config``; a previous
``manifest.json`` also works) overridden by command-line flags.  Output
goes to ``--output`` or, by default, a subdirectory of
``$SPLINE_UPWIND_OUTPUT`` (current directory if unset).

Exit codes: 0 success, 2 usage or configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .discretization import make_discretization
from .errors import (ConfigurationError, DataError, GeometryError, ParameterError, SolverError,
                     StabilizationError)
from .metrics import estimate_orders, relative_l2_error, write_convergence_csv
from .problems import EXPRESSION_HELP, PROBLEMS, get_problem
from .solver import LINEAR_SOLVERS, METHODS, solve
from .splines import SplineSpace, knots_from_breakpoints, make_open_uniform_knots
from .stabilization import compute_tables, write_table_csv

__all__ = ["ExperimentConfig", "main", "build_parser", "parse_section", "OUTPUT_ENV"]

log = logging.getLogger("spline_upwind")

OUTPUT_ENV = "SPLINE_UPWIND_OUTPUT"
EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 2, 3
PROBLEM_NAMES = tuple(PROBLEMS) + ("custom",)


@dataclass
class ExperimentConfig:
    """Resolved settings of one experiment; every field lands in the manifest."""

    problem: str = "smooth_advection"
    method: str = "su"
    degree: int = 3
    elements: int = 64
    time_elements: int | None = None
    tau_supg: float | None = None
    tau_sc: float | None = None
    tol: float = 1e-3
    max_iter: int = 20
    damping: float = 1.0
    adaptive_damping: bool = True
    linear_solver: str = "auto"
    samples_per_span: int = 4
    error_region: list | None = None
    section: list | None = None
    output: str | None = None
    record_timings: bool = False
    degrees: list | None = None
    levels: list | None = None
    custom: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.problem not in PROBLEM_NAMES:
            raise ConfigurationError(f"unknown problem {self.problem!r}; choose from "
                                     f"{', '.join(PROBLEM_NAMES)}")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if int(self.degree) < 1:
            raise ConfigurationError("degree must be at least 1")
        if int(self.elements) < 1:
            raise ConfigurationError("elements must be at least 1")
        if self.time_elements is not None and int(self.time_elements) < 1:
            raise ConfigurationError("time_elements must be at least 1")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ConfigurationError("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise ConfigurationError("damping must lie in (0, 1]")
        if int(self.samples_per_span) < 1:
            raise ConfigurationError("samples_per_span must be at least 1")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ConfigurationError(f"linear_solver must be one of {', '.join(LINEAR_SOLVERS)}")
        if self.error_region is not None:
            if len(self.error_region) != 2 or not self.error_region[0] < self.error_region[1]:
                raise ConfigurationError("error_region must be [a, b] with a < b")

    def build_problem(self):
        return get_problem(self.problem, **(self.custom if self.problem == "custom" else {}))


# ---------------------------------------------------------------------------
# argument parsing


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_section(text: str):
    """``"x1,y1:x2,y2"`` -> ``[[x1, y1], [x2, y2]]``."""
    try:
        a, b = text.split(":")
        pa, pb = _float_list(a), _float_list(b)
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError(f"section must look like x1,y1:x2,y2, got {text!r}") from None
    if len(pa) != len(pb) or not pa:
        raise argparse.ArgumentTypeError("section endpoints need the same number of coordinates")
    return [pa, pb]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON configuration file (or a previous manifest.json)")
    p.add_argument("--problem", choices=PROBLEM_NAMES)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--degree", type=int)
    p.add_argument("--elements", type=int, help="uniform spans per direction (h = 1/elements)")
    p.add_argument("--time-elements", type=int, dest="time_elements",
                   help="time spans for the heat equation (default: --elements)")
    p.add_argument("--tau-supg", type=float, dest="tau_supg", help="SUPG parameter (default h/2)")
    p.add_argument("--tau-sc", type=float, dest="tau_sc",
                   help="shock-capturing parameter (default h^2/4)")
    p.add_argument("--tol", type=float, help="fixed-point tolerance on max |theta change|")
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--damping", type=float, help="initial theta relaxation factor in (0, 1]")
    p.add_argument("--no-adaptive-damping", action="store_const", const=False,
                   dest="adaptive_damping", help="keep the relaxation factor fixed")
    p.add_argument("--linear-solver", choices=LINEAR_SOLVERS, dest="linear_solver")
    p.add_argument("--samples-per-span", type=int, dest="samples_per_span")
    p.add_argument("--error-region", type=_float_list, dest="error_region", metavar="A,B")
    p.add_argument("--section", type=parse_section, metavar="X1,Y1:X2,Y2",
                   help="physical segment A-B for section samples (heat problems)")
    p.add_argument("--output", help=f"output directory (default: under ${OUTPUT_ENV})")
    p.add_argument("--record-timings", action="store_const", const=True, dest="record_timings",
                   help="fill the wall_time_s column (makes the CSV run-dependent)")
    g = p.add_argument_group("custom problems", EXPRESSION_HELP)
    g.add_argument("--kind", choices=("advection", "advdiff", "heat"))
    g.add_argument("--forcing", help="forcing expression")
    g.add_argument("--exact", help="exact solution expression (time-only problems)")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--final-time", type=float, dest="T")
    g.add_argument("--geometry", choices=("interval", "quarter_annulus"))
    g.add_argument("--load-subdivisions", type=int, dest="load_subdivisions")
    g.add_argument("--time-resolution", type=float, dest="time_resolution")


CUSTOM_KEYS = ("kind", "forcing", "exact", "epsilon", "T", "geometry", "load_subdivisions",
               "time_resolution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spline-upwind",
        description="Space-time spline solver with upwind stabilization.",
        epilog=f"Output root: ${OUTPUT_ENV}. Exit codes: 0 ok, 2 usage, 3 solver failure.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve one configuration")
    _add_common(run)

    conv = sub.add_parser("convergence", help="errors and rates over degrees and levels")
    _add_common(conv)
    conv.add_argument("--degrees", type=_int_list, help="e.g. 1,2,3,4")
    conv.add_argument("--levels", type=_int_list, help="exponents k of h = 2^-k, e.g. 3,4,5,6,7")

    dump = sub.add_parser("dump-stab", help="write the upwind coefficient table of a time mesh")
    dump.add_argument("--degree", type=int, required=True)
    dump.add_argument("--elements", type=int, default=10)
    dump.add_argument("--final-time", type=float, dest="T", default=1.0)
    dump.add_argument("--breakpoints", type=_float_list,
                      help="explicit (non-uniform) breakpoints; overrides --elements")
    dump.add_argument("--output", help=f"output directory (default: under ${OUTPUT_ENV})")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(data)
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None and f.name != "custom":
            setattr(cfg, f.name, value)
    custom = dict(cfg.custom)
    for key in CUSTOM_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            custom[key] = value
    cfg.custom = custom
    if cfg.problem == "custom" and "forcing" not in cfg.custom:
        raise ConfigurationError("the custom problem needs --forcing")
    if cfg.problem == "custom":
        cfg.custom.setdefault("kind", "advection")
    cfg.validate()
    return cfg


def _output_dir(cfg_output, default_name: str) -> Path:
    if cfg_output:
        out = Path(cfg_output)
    else:
        out = Path(os.environ.get(OUTPUT_ENV, ".")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# writers


def _num(x) -> str:
    return repr(float(x))


def _write_rows(path: Path, header, columns) -> None:
    cols = [np.asarray(c, dtype=float).ravel() for c in columns]
    for name, c in zip(header, cols):
        if not np.all(np.isfinite(c)):
            raise DataError(f"non-finite values in column {name!r} of {path.name}")
    # Python floats: repr gives the shortest round-trip text
    rows = np.column_stack(cols).tolist()
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        fh.writelines(",".join(map(repr, row)) + "\n" for row in rows)


def _span_samples(breaks: np.ndarray, per_span: int) -> np.ndarray:
    a, b = breaks[:-1], breaks[1:]
    s = np.arange(per_span) / per_span
    pts = (a[:, None] + (b - a)[:, None] * s[None, :]).ravel()
    return np.append(pts, breaks[-1])


def _write_time_samples(out: Path, disc, result, problem, per_span: int) -> None:
    t = _span_samples(disc.knots.breakpoints, per_span)
    u = result.u
    header, cols = ["t", "u_h"], [t, disc.evaluate(u, t)]
    if problem.exact is not None:
        header.append("u_ex")
        cols.append(problem.exact(t))
    res = disc.evaluate(u, t, 1) - problem.forcing(t)
    if problem.epsilon:
        res = res - problem.epsilon * disc.evaluate(u, t, 2)
    header.append("residual")
    cols.append(res)
    if result.theta is not None:
        header.append("theta")
        cols.append(result.theta(t))
    _write_rows(out / "samples.csv", header, cols)


def _coord_names(d: int):
    return ["x"] if d == 1 else ["x", "y"]


def _write_heat_samples(out: Path, disc, result, per_span: int) -> None:
    axes = [_span_samples(kv.breakpoints, per_span) for kv in disc.space_knots]
    t = _span_samples(disc.knots.breakpoints, per_span)
    f = disc.grid_fields(result.u, axes, t)
    res = f["dt"] - f["laplacian"] - disc.forcing_grid(f["x"], t)
    shape = f["value"].shape
    d = disc.dim
    X = np.broadcast_to(f["x"][..., None, :], shape + (d,))
    T = np.broadcast_to(t.reshape((1,) * d + (-1,)), shape)
    header = _coord_names(d) + ["t", "u_h", "residual"]
    cols = [X[..., l].ravel(order="F") for l in range(d)] + [
        T.ravel(order="F"), f["value"].ravel(order="F"), res.ravel(order="F")]
    if result.theta is not None:
        header.append("theta")
        cols.append(result.theta.evaluate_grid(axes + [t]).ravel(order="F"))
    _write_rows(out / "samples.csv", header, cols)


def section_parameters(disc, section, num: int):
    """Equispaced points on the part of segment ``section`` inside the domain.

    Returns physical and parametric coordinates of ``num`` points.  A
    segment that leaves the domain is clipped (with a warning); one that
    misses it entirely is a configuration error.
    """
    gmap = disc.problem.geometry
    A, B = (np.asarray(p, dtype=float) for p in section)
    if A.size != gmap.dim:
        raise ConfigurationError(f"section endpoints need {gmap.dim} coordinates")

    def inside(s):
        x = A[None, :] + np.atleast_1d(s)[:, None] * (B - A)[None, :]
        return gmap.inverse(x, strict=False)[1]

    probe = np.linspace(0.0, 1.0, 2001)
    mask = inside(probe)
    if not mask.any():
        raise ConfigurationError("section line does not meet the domain")
    i, j = np.flatnonzero(mask)[[0, -1]]
    lo, hi = probe[i], probe[j]
    if i > 0:
        a, b = probe[i - 1], probe[i]
        for _ in range(50):
            m = 0.5 * (a + b)
            a, b = (a, m) if inside(m)[0] else (m, b)
        lo = b
    if j < probe.size - 1:
        a, b = probe[j], probe[j + 1]
        for _ in range(50):
            m = 0.5 * (a + b)
            a, b = (m, b) if inside(m)[0] else (a, m)
        hi = a
    if lo > 0 or hi < 1:
        log.warning("section line clipped to the domain: s in [%.6f, %.6f]", lo, hi)
    s = np.linspace(lo, hi, num)
    x = A[None, :] + s[:, None] * (B - A)[None, :]
    eta, ok = gmap.inverse(x, strict=False)
    if not ok.all():
        raise ConfigurationError("section line is not connected inside the domain")
    return x, eta


def _write_section(out: Path, disc, result, section, per_span: int) -> None:
    from .problems import evaluate_solution

    num = per_span * disc.elements + 1
    x, eta = section_parameters(disc, section, num)
    t = _span_samples(disc.knots.breakpoints, per_span)
    E = np.repeat(eta, t.size, axis=0)
    Tt = np.tile(t, eta.shape[0])
    vals = evaluate_solution(result.u, disc.space, (E, Tt), disc.spaces, disc.problem.geometry)
    X = np.repeat(x, t.size, axis=0)
    s = np.repeat(np.linalg.norm(x - x[0], axis=1), t.size)
    header = ["s"] + _coord_names(disc.dim) + ["t", "u_h"]
    cols = [s] + [X[:, l] for l in range(disc.dim)] + [Tt, vals["value"]]
    _write_rows(out / "section.csv", header, cols)


def _write_theta(out: Path, disc, theta) -> None:
    axes = disc.theta_axes()
    grids = np.meshgrid(*axes, indexing="ij")
    vals = theta.values
    if disc.is_heat:
        mesh = np.stack(grids[:-1], axis=-1)
        x = disc.problem.geometry.evaluate(mesh)
        cols = [x[..., l].ravel(order="F") for l in range(disc.dim)]
        header = _coord_names(disc.dim) + ["t", "theta"]
    else:
        cols, header = [], ["t", "theta"]
    cols += [grids[-1].ravel(order="F"), vals.ravel(order="F")]
    _write_rows(out / "theta.csv", header, cols)


def _versions() -> dict:
    import scipy

    return {"spline_upwind": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, extra: dict) -> None:
    manifest = {"command": command, "config": cfg.to_dict(), "versions": _versions()}
    manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# ---------------------------------------------------------------------------
# commands


def _solve(cfg: ExperimentConfig, problem, degree: int, elements: int):
    disc = make_discretization(problem, degree, elements, time_elements=cfg.time_elements)
    result = solve(disc, cfg.method, tol=cfg.tol, max_iter=cfg.max_iter, damping=cfg.damping,
                   tau_supg=cfg.tau_supg, tau_sc=cfg.tau_sc, linear_solver=cfg.linear_solver,
                   adaptive_damping=cfg.adaptive_damping)
    return disc, result


def _error(problem, disc, result, region):
    if problem.exact is None or disc.is_heat:
        return None
    region = region if region is not None else problem.error_region
    return relative_l2_error(disc.function(result.u), problem.exact, disc.knots, region)


def _report_dict(result) -> dict:
    rep = result.report
    return {"iterations": rep.iterations, "converged": rep.converged,
            "theta_changes": rep.theta_changes, "solution_changes": rep.solution_changes,
            "linear_solver": rep.linear_solver, "dampings": rep.dampings}


def cmd_run(cfg: ExperimentConfig) -> int:
    problem = cfg.build_problem()
    if cfg.section is not None and not (problem.is_heat and problem.dim == 2):
        raise ConfigurationError("--section applies to two-dimensional heat problems")
    name = f"{cfg.problem}_{cfg.method}_p{cfg.degree}_n{cfg.elements}"
    out = _output_dir(cfg.output, name)
    timings = {}
    start = time.perf_counter()
    disc, result = _solve(cfg, problem, cfg.degree, cfg.elements)
    timings["solve_s"] = result.wall_time
    outputs = []
    if disc.is_heat:
        _write_heat_samples(out, disc, result, cfg.samples_per_span)
        section = cfg.section
        if section is None and problem.dim == 2:
            section = problem.meta.get("section")
        if section is not None:
            _write_section(out, disc, result, section, cfg.samples_per_span)
            outputs.append("section.csv")
    else:
        _write_time_samples(out, disc, result, problem, cfg.samples_per_span)
    outputs.append("samples.csv")
    err = _error(problem, disc, result, cfg.error_region)
    if err is not None:
        _write_single_error(out / "errors.csv", cfg.degree, disc, err,
                            result.wall_time if cfg.record_timings else None)
        outputs.append("errors.csv")
    if result.theta is not None:
        _write_theta(out, disc, result.theta)
        outputs.append("theta.csv")
    if cfg.method in ("ncsu", "su"):
        write_table_csv(out / "stabilization.csv", disc.table, disc.greville)
        outputs.append("stabilization.csv")
    timings["total_s"] = time.perf_counter() - start
    _write_manifest(out, "run", cfg, {
        "outputs": sorted(outputs), "timings": timings, "num_dofs": disc.num_dofs,
        "h": disc.h, "error": err, "solver": _report_dict(result)})
    if not result.report.converged:
        log.warning("nonlinear iteration did not converge; results are the last iterate")
    print(f"{cfg.problem} {cfg.method} p={cfg.degree} n={cfg.elements}: N_dof={disc.num_dofs}"
          + (f" error={err:.6e}" if err is not None else "") + f" -> {out}")
    return EXIT_OK


def _write_single_error(path: Path, degree: int, disc, err: float, wall) -> None:
    from .metrics import CONVERGENCE_COLUMNS

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_COLUMNS)
        w.writerow([degree, _num(disc.h), disc.num_dofs, _num(err), "",
                    "" if wall is None else _num(wall)])


def cmd_convergence(cfg: ExperimentConfig) -> int:
    problem = cfg.build_problem()
    if problem.exact is None or problem.is_heat:
        raise ConfigurationError(f"problem {cfg.problem!r} has no exact solution to measure errors")
    degrees = cfg.degrees or [cfg.degree]
    levels = cfg.levels
    if not levels or len(levels) < 2:
        raise ConfigurationError("a convergence study needs at least two levels")
    if any(np.diff(levels) <= 0):
        raise ConfigurationError("levels must be strictly increasing exponents")
    name = f"{cfg.problem}_{cfg.method}_convergence"
    out = _output_dir(cfg.output, name)
    records, summary = [], {}
    for p in degrees:
        hs, errs, ndofs, times = [], [], [], []
        for k in levels:
            disc, result = _solve(cfg, problem, p, 2 ** k)
            hs.append(disc.h)
            errs.append(_error(problem, disc, result, cfg.error_region))
            ndofs.append(disc.num_dofs)
            times.append(result.wall_time)
        rec = estimate_orders(hs, errs, p, ndofs, times)
        records.append(rec)
        summary[str(p)] = {"errors": errs, "orders": rec.orders.tolist(),
                           "fitted_order_last3": rec.fitted_order(), "wall_times": times}
        print(f"p={p}: errors " + " ".join(f"{e:.3e}" for e in errs)
              + "  orders " + " ".join(f"{o:.2f}" for o in rec.orders))
    write_convergence_csv(out / "errors.csv", records, include_times=cfg.record_timings)
    _write_manifest(out, "convergence", cfg, {"outputs": ["errors.csv"], "summary": summary})
    return EXIT_OK


def cmd_dump_stab(args) -> int:
    if args.degree < 1:
        raise ConfigurationError("degree must be at least 1")
    if args.breakpoints:
        kv = knots_from_breakpoints(args.degree, np.asarray(args.breakpoints))
    else:
        kv = make_open_uniform_knots(args.degree, args.elements, (0.0, args.T))
    from .assembly import SystemBlocks
    from .splines import greville_abscissae

    space = SplineSpace.time(kv)
    table = compute_tables(SystemBlocks.from_spaces(space), with_sigma=True)
    out = _output_dir(args.output, f"stabilization_p{args.degree}_n{kv.num_elements}")
    write_table_csv(out / "stabilization.csv", table, greville_abscissae(kv)[space.active])
    cond = table.cond_tau[np.isfinite(table.cond_tau)]
    print(f"p={args.degree} N_t={table.N_t}: max condition {cond.max() if cond.size else float('nan'):.3e}"
          f" -> {out / 'stabilization.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dump-stab":
            return cmd_dump_stab(args)
        cfg = resolve_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_convergence(cfg)
    except (ConfigurationError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, StabilizationError, GeometryError, DataError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
