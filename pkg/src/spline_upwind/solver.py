"""
Linear solves and nonlinear iterations for the stabilized space-time systems.

Systems are assembled by :func:`assemble_system`.  Those that are sums of
Kronecker products ``sum_r T_r (x) S_r`` keep their factors so that a
causal (block lower triangular in time) system can be solved by forward
substitution over the time index; everything else goes to a sparse LU.
"""
from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import kron_matrix
from .errors import ConfigurationError, ParameterError, SolverError
from .stabilization import (ThetaField, ncsu_matrix, shock_capturing_operator, sigma_matrix,
                            su_operators, su_time_factors, supg_operators, theta_from_solution)

__all__ = [
    "METHODS",
    "SpaceTimeSystem",
    "FixedPointReport",
    "SolveResult",
    "assemble_system",
    "solve_direct",
    "solve_block_triangular",
    "solve_diagonalized",
    "is_block_lower_triangular",
    "solve_system",
    "fixed_point_solve",
    "shock_capturing_solve",
    "solve",
]

log = logging.getLogger(__name__)

METHODS = ("galerkin", "supg", "supg_sc", "ncsu", "su")

RESIDUAL_TOL = 1e-10
TRIANGULAR_TOL = 1e-12
# fill-reducing ordering; markedly faster than COLAMD on the space-time stencils
PERMC = "MMD_AT_PLUS_A"
# largest spatial size for which the dense generalized eigenproblem is used
MAX_DIAGONALIZED = 6000
LINEAR_SOLVERS = ("auto", "direct", "triangular", "diagonalized")
# adaptive relaxation of the theta iteration
STALL_WINDOW = 3
STALL_RATIO = 0.7
MIN_DAMPING = 0.125


@dataclass(eq=False)
class SpaceTimeSystem:
    """``matrix @ u = rhs``; ``pairs`` holds Kronecker factors when separable.

    Unknowns are ordered ``i_s + N_s * i_t``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    N_s: int = 1
    N_t: int | None = None
    pairs: list | None = None

    def __post_init__(self):
        if self.N_t is None:
            self.N_t = self.matrix.shape[0] // self.N_s

    def residual_norm(self, u) -> float:
        """Relative residual ``||A u - F|| / ||F||`` (absolute if ``F = 0``)."""
        r = np.linalg.norm(self.matrix @ u - self.rhs)
        nf = np.linalg.norm(self.rhs)
        return float(r / nf) if nf > 0 else float(r)


@dataclass
class FixedPointReport:
    """Convergence history of a nonlinear iteration."""

    iterations: int = 0
    theta_changes: list = field(default_factory=list)
    solution_changes: list = field(default_factory=list)
    converged: bool = False
    linear_solver: str = ""
    dampings: list = field(default_factory=list)


@dataclass(eq=False)
class SolveResult:
    u: np.ndarray
    disc: object
    method: str
    theta: ThetaField | None = None
    report: FixedPointReport | None = None
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# linear algebra


def solve_direct(A, rhs, check: bool = True):
    """Sparse LU solve with a relative residual check."""
    A = sp.csc_matrix(A)
    rhs = np.asarray(rhs, dtype=float)
    try:
        lu = spla.splu(A, permc_spec=PERMC)
        u = lu.solve(rhs)
    except RuntimeError as exc:  # exactly singular
        raise SolverError(f"sparse LU failed: {exc}", condition=float("inf")) from exc
    if not np.all(np.isfinite(u)):
        raise SolverError("sparse LU produced non-finite values", condition=_condest(A))
    if check:
        nf = np.linalg.norm(rhs)
        r = np.linalg.norm(A @ u - rhs) / (nf if nf > 0 else 1.0)
        if r > RESIDUAL_TOL:
            cond = _condest(A)
            raise SolverError(f"relative residual {r:.3e} exceeds {RESIDUAL_TOL:g} "
                              f"(condition estimate {cond:.3e})", condition=cond)
    return u


def _condest(A) -> float:
    try:
        lu = spla.splu(sp.csc_matrix(A), permc_spec=PERMC)
        inv = spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda x: lu.solve(x, "T"))
        return float(spla.onenormest(A) * spla.onenormest(inv))
    except Exception:  # noqa: BLE001 - best effort diagnostic
        return float("inf")


def is_block_lower_triangular(pairs, tol: float = TRIANGULAR_TOL) -> bool:
    """Whether every time factor is lower triangular up to ``tol`` (relative)."""
    for T, _ in pairs:
        T = sp.csr_matrix(T)
        upper = sp.triu(T, k=1)
        scale = max(abs(T).max(), 1e-300) if T.nnz else 1.0
        if upper.nnz and abs(upper).max() > tol * scale:
            return False
    return True


def solve_block_triangular(pairs, rhs, N_s: int, N_t: int, tol: float = TRIANGULAR_TOL):
    """Forward substitution over time for ``sum_r T_r (x) S_r``.

    Raises :class:`~spline_upwind.errors.ConfigurationError` if some time
    factor is not lower triangular; entries above the diagonal that are
    below ``tol`` relative to the factor are treated as round-off and
    ignored.  Diagonal blocks ``sum_r T_r[i, i] S_r`` with identical
    coefficients share one factorization.
    """
    if not is_block_lower_triangular(pairs, tol):
        raise ConfigurationError("time factors are not lower triangular; "
                                 "the block forward substitution does not apply")
    Ts = [sp.tril(sp.csr_matrix(T)).tocsr() for T, _ in pairs]
    Ss = [sp.csr_matrix(S) for _, S in pairs]
    F = np.asarray(rhs, dtype=float).reshape((N_s, N_t), order="F")
    U = np.zeros((N_s, N_t))
    cache: dict = {}
    for i in range(N_t):
        b = F[:, i].copy()
        for T, S in zip(Ts, Ss):
            row = T.getrow(i)
            cols, vals = row.indices, row.data
            mask = cols < i
            if np.any(mask):
                b -= S @ (U[:, cols[mask]] @ vals[mask])
        diag = tuple(round(float(T[i, i]), 15) for T in Ts)
        lu = cache.get(diag)
        if lu is None:
            block = sum(T[i, i] * S for T, S in zip(Ts, Ss))
            block = sp.csc_matrix(block)
            try:
                lu = spla.splu(block) if N_s > 1 else block.toarray()
            except RuntimeError as exc:
                raise SolverError(f"diagonal block {i} is singular: {exc}",
                                  condition=float("inf")) from exc
            cache[diag] = lu
        U[:, i] = lu.solve(b) if N_s > 1 else b / lu[0, 0]
    log.debug("block forward substitution: %d distinct diagonal blocks", len(cache))
    return U.ravel(order="F")


def _diagonalizable(pairs) -> bool:
    if pairs is None or len(pairs) != 2:
        return False
    (_, Ms), (_, Ks) = pairs
    return all(abs(S - S.T).max() <= 1e-12 * abs(S).max() for S in (Ms, Ks))


def solve_diagonalized(pairs, rhs, N_s: int, N_t: int):
    """Solve ``T_1 (x) M + T_2 (x) K`` with symmetric ``K`` and SPD ``M``.

    The generalized eigenvectors ``K V = M V diag(lam)``, ``V^T M V = I``
    decouple the space directions: with ``u = (I (x) V) y`` every spatial
    mode ``k`` solves the time system ``(T_1 + lam_k T_2) y_k = (V^T F)_k``.
    """
    if not _diagonalizable(pairs):
        raise ConfigurationError("system is not a symmetric two-term Kronecker sum")
    (T1, Ms), (T2, Ks) = pairs
    try:
        lam, V = sla.eigh(Ks.toarray(), Ms.toarray())
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"spatial eigenproblem failed: {exc}") from exc
    F = np.asarray(rhs, dtype=float).reshape((N_s, N_t), order="F")
    G = V.T @ F
    T1, T2 = sp.csc_matrix(T1), sp.csc_matrix(T2)
    Y = np.empty_like(G)
    for k in range(N_s):
        try:
            Y[k] = spla.splu(T1 + lam[k] * T2).solve(G[k])
        except RuntimeError as exc:
            raise SolverError(f"time system of spatial mode {k} is singular: {exc}",
                              condition=float("inf")) from exc
    return (V @ Y).ravel(order="F")


def solve_system(system: SpaceTimeSystem, method: str = "auto"):
    """Solve ``system`` with one of :data:`LINEAR_SOLVERS`.

    ``auto`` uses forward substitution when Kronecker factors are
    available and lower triangular, the spatial diagonalization for the
    remaining symmetric two-term Kronecker sums of moderate spatial size,
    and the sparse LU otherwise.  Returns ``(u, method_used)``.
    """
    if method not in LINEAR_SOLVERS:
        raise ParameterError(f"unknown linear solver {method!r}")
    if method == "auto":
        method = "direct"
        if system.pairs is not None and system.N_s > 1:
            if is_block_lower_triangular(system.pairs):
                method = "triangular"
            elif system.N_s <= MAX_DIAGONALIZED and _diagonalizable(system.pairs):
                method = "diagonalized"
    if method == "direct":
        return solve_direct(system.matrix, system.rhs), "direct"
    if system.pairs is None:
        raise ConfigurationError(f"the {method} solver needs Kronecker factors")
    if method == "triangular":
        u = solve_block_triangular(system.pairs, system.rhs, system.N_s, system.N_t)
    else:
        u = solve_diagonalized(system.pairs, system.rhs, system.N_s, system.N_t)
    r = system.residual_norm(u)
    if r > RESIDUAL_TOL:
        raise SolverError(f"{method} solve residual {r:.3e} exceeds {RESIDUAL_TOL:g}")
    return u, method


# ---------------------------------------------------------------------------
# assembly of the complete systems


def assemble_system(disc, method: str, theta: ThetaField | None = None, *,
                    tau_supg: float | None = None, u_sc=None, tau_sc: float | None = None,
                    u_ref: float | None = None) -> SpaceTimeSystem:
    """Galerkin system plus the requested stabilization.

    Parameters
    ----------
    disc : TimeDiscretization or HeatDiscretization
    method : {"galerkin", "supg", "supg_sc", "ncsu", "su"}
    theta : ThetaField, optional
        Shock indicator for ``su`` (default: identically 1).
    tau_supg : float, optional
        SUPG parameter (default ``h/2``).
    u_sc, tau_sc, u_ref
        Current iterate and parameters of the shock-capturing term
        (``supg_sc`` only; without ``u_sc`` the plain SUPG system results).
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {METHODS}")
    b = disc.blocks
    F = disc.load()
    if disc.is_heat:
        return _assemble_heat(disc, method, theta, F, tau_supg)

    A = disc.galerkin_matrix()
    if method in ("supg", "supg_sc"):
        S, G = supg_operators(disc, tau_supg)
        A, F = A + S, F + G
        if method == "supg_sc" and u_sc is not None:
            ref = max(float(np.max(np.abs(u_sc))), 1e-12) if u_ref is None else u_ref
            A = A + shock_capturing_operator(disc, u_sc, ref, tau_sc)
    elif method == "ncsu":
        if disc.problem.epsilon:
            raise ConfigurationError("NCSU is defined for pure advection in time")
        A = A + ncsu_matrix(disc.table, b.D)
    elif method == "su":
        theta = theta if theta is not None else ThetaField.constant(disc.theta_axes(), 1.0)
        S, G = su_operators(disc, disc.table, theta)
        A, F = A + S, F + G
    return SpaceTimeSystem(sp.csr_matrix(A), np.asarray(F, dtype=float), 1, disc.N_t)


def _assemble_heat(disc, method, theta, F, tau_supg):
    b = disc.blocks
    if method == "supg_sc":
        raise ConfigurationError("shock capturing is defined for the 1D advection problem only")
    pairs = list(b.galerkin_pairs())
    if method == "galerkin":
        return SpaceTimeSystem(kron_matrix(pairs), F, disc.N_s, disc.N_t, pairs)
    if method == "supg":
        S, G = supg_operators(disc, tau_supg)
        return SpaceTimeSystem((kron_matrix(pairs) + S).tocsr(), F + G, disc.N_s, disc.N_t)
    table = disc.table
    if method == "ncsu":
        pairs = [((b.W + ncsu_matrix(table, b.D)).tocsr(), b.M_s),
                 ((b.M + sigma_matrix(table, b.D)).tocsr(), b.K_s)]
        return SpaceTimeSystem(kron_matrix(pairs), F, disc.N_s, disc.N_t, pairs)
    # su
    theta = theta if theta is not None else ThetaField.constant(disc.theta_axes(), 1.0)
    S, G = su_operators(disc, table, theta)
    A = (kron_matrix(pairs) + S).tocsr()
    fac = None
    if theta.is_constant and float(theta.values.flat[0]) == 1.0:
        fac = su_time_factors(table, b)
    return SpaceTimeSystem(A, F + G, disc.N_s, disc.N_t, fac)


# ---------------------------------------------------------------------------
# nonlinear iterations


def fixed_point_solve(disc, tol: float = 1e-3, max_iter: int = 20, damping: float = 1.0,
                      force_theta: float | None = None, linear_solver: str = "auto",
                      adaptive: bool = True):
    """Picard iteration on the shock indicator of the SU method.

    Starts from ``theta = 1``, alternates SU solves and indicator updates
    ``theta <- damping * theta(u) + (1 - damping) * theta`` and stops once
    the max-norm change of theta is at most ``tol``.  With ``adaptive``
    the damping is halved (down to ``MIN_DAMPING``) whenever the change
    has not dropped below ``STALL_RATIO`` times its value ``STALL_WINDOW``
    iterations earlier; this breaks the limit cycles that local switching
    of theta can cause.  With ``force_theta`` the indicator is frozen at
    that constant and a single solve is done.

    Returns ``(u, theta, report)``; ``theta`` is the indicator computed
    from the returned ``u``.  On non-convergence the last iterate is
    returned with ``report.converged = False``.
    """
    if not 0 < damping <= 1:
        raise ParameterError("damping must lie in (0, 1]")
    if max_iter < 1:
        raise ParameterError("max_iter must be at least 1")
    axes = disc.theta_axes()
    report = FixedPointReport()
    if force_theta is not None:
        theta = ThetaField.constant(axes, float(force_theta))
        u, used = solve_system(assemble_system(disc, "su", theta), linear_solver)
        report.iterations = 1
        report.theta_changes.append(0.0)
        report.solution_changes.append(float("nan"))
        report.converged = True
        report.linear_solver = used
        return u, theta, report

    theta = ThetaField.constant(axes, 1.0)
    u_prev = None
    solvers = []
    last_change = 0
    for it in range(1, max_iter + 1):
        u, used = solve_system(assemble_system(disc, "su", theta), linear_solver)
        solvers.append(used)
        new = theta_from_solution(disc, u)
        if damping < 1:
            new = ThetaField(axes, damping * new.values + (1 - damping) * theta.values)
        dtheta = float(np.max(np.abs(new.values - theta.values)))
        du = float("nan") if u_prev is None else float(
            np.linalg.norm(u - u_prev) / max(np.linalg.norm(u), 1e-300))
        report.iterations = it
        report.theta_changes.append(dtheta)
        report.solution_changes.append(du)
        report.dampings.append(damping)
        log.info("SU iteration %d: |dtheta| = %.3e, |du|/|u| = %.3e, damping %.3g",
                 it, dtheta, du, damping)
        theta, u_prev = new, u
        if dtheta <= tol:
            report.converged = True
            break
        if adaptive and damping > MIN_DAMPING and it > last_change + STALL_WINDOW \
                and dtheta > STALL_RATIO * report.theta_changes[-1 - STALL_WINDOW]:
            damping = max(damping / 2, MIN_DAMPING)
            last_change = it
    else:
        log.warning("SU fixed point did not converge in %d iterations (last change %.3e)",
                    max_iter, report.theta_changes[-1])
    report.linear_solver = ",".join(sorted(set(solvers)))
    return u, theta, report


def shock_capturing_solve(disc, tau_supg: float | None = None, tau_sc: float | None = None,
                          tol: float = 1e-3, max_iter: int = 20):
    """SUPG with residual-based shock capturing, by Picard iteration.

    Starts from the SUPG solution; stops when the relative change of the
    coefficients is at most ``tol``.  Returns ``(u, report)``.
    """
    report = FixedPointReport(linear_solver="direct")
    sys0 = assemble_system(disc, "supg", tau_supg=tau_supg)
    u = solve_direct(sys0.matrix, sys0.rhs)
    for it in range(1, max_iter + 1):
        sys = assemble_system(disc, "supg_sc", tau_supg=tau_supg, u_sc=u, tau_sc=tau_sc)
        new = solve_direct(sys.matrix, sys.rhs)
        du = float(np.linalg.norm(new - u) / max(np.linalg.norm(new), 1e-300))
        report.iterations = it
        report.solution_changes.append(du)
        u = new
        if du <= tol:
            report.converged = True
            break
    else:
        log.warning("shock capturing iteration did not converge in %d iterations", max_iter)
    return u, report


def solve(disc, method: str, *, tol: float = 1e-3, max_iter: int = 20, damping: float = 1.0,
          tau_supg: float | None = None, tau_sc: float | None = None,
          linear_solver: str = "auto", adaptive_damping: bool = True) -> SolveResult:
    """Solve ``disc`` with one of :data:`METHODS`."""
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {METHODS}")
    start = _time.perf_counter()
    theta = report = None
    if method == "su":
        u, theta, report = fixed_point_solve(disc, tol, max_iter, damping,
                                             linear_solver=linear_solver,
                                             adaptive=adaptive_damping)
    elif method == "supg_sc":
        u, report = shock_capturing_solve(disc, tau_supg, tau_sc, tol, max_iter)
    else:
        u, used = solve_system(assemble_system(disc, method, tau_supg=tau_supg), linear_solver)
        report = FixedPointReport(iterations=1, converged=True, linear_solver=used)
    return SolveResult(u=u, disc=disc, method=method, theta=theta, report=report,
                       wall_time=_time.perf_counter() - start)
