import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from spline_upwind.assembly import SystemBlocks, kron_matrix
from spline_upwind.discretization import HeatDiscretization, TimeDiscretization
from spline_upwind.errors import ConfigurationError, StabilizationError
from spline_upwind.problems import get_problem
from spline_upwind.solver import assemble_system
from spline_upwind.splines import SplineSpace, knots_from_breakpoints, make_open_uniform_knots
from spline_upwind.stabilization import (StabilizationTable, ThetaField, compute_tables,
                                         compute_theta, ncsu_matrix, sample_axis, sigma_matrix,
                                         su_operators, su_time_factors, window_max,
                                         write_table_csv)


def blocks(p, n, breaks=None):
    kv = knots_from_breakpoints(p, breaks) if breaks is not None else make_open_uniform_knots(p, n)
    return SystemBlocks.from_spaces(SplineSpace.time(kv))


def strict_upper(A):
    return abs(sp.triu(A, k=1)).max() if sp.triu(A, k=1).nnz else 0.0


def test_linear_tau_is_one_half():
    b = blocks(1, 8)
    t = compute_tables(b)
    np.testing.assert_allclose(t.tau[:-1, 0], 0.5, rtol=1e-13)
    assert t.tau[-1, 0] == 0.0
    np.testing.assert_array_equal(t.active_length, [1] * 7 + [0])
    assert t.first_order()[-1] == 0.5


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5])
def test_ncsu_and_sigma_make_lower_triangular(p):
    b = blocks(p, 12)
    t = compute_tables(b)
    A = b.W + ncsu_matrix(t, b.D)
    B = b.M + sigma_matrix(t, b.D)
    assert strict_upper(A) <= 1e-10 * abs(A).max()
    assert strict_upper(B) <= 1e-10 * abs(B).max()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.lists(st.floats(0.5, 1.0), min_size=4, max_size=10))
def test_triangular_on_quasi_uniform_meshes(p, spans):
    breaks = np.concatenate([[0.0], np.cumsum(spans)])
    b = blocks(p, None, breaks)
    t = compute_tables(b)
    A = b.W + ncsu_matrix(t, b.D)
    assert strict_upper(A) <= 1e-9 * abs(A).max()


def test_active_length_near_end():
    t = compute_tables(blocks(3, 6))
    np.testing.assert_array_equal(t.active_length[-4:], [3, 2, 1, 0])
    assert np.all(t.tau[-2, 1:] == 0.0)
    assert np.isnan(t.cond_tau[-1])


def test_restrict_keeps_active_lengths():
    t = compute_tables(blocks(2, 6))
    sub = t.restrict(np.arange(t.N_t - 1))
    np.testing.assert_array_equal(sub.active_length, t.active_length[:-1])
    assert sub.fallback_rows.sum() == 0.0
    np.testing.assert_array_equal(sub.tau, t.tau[:-1])


def test_singular_local_system_raises(monkeypatch):
    import spline_upwind.stabilization as stab
    monkeypatch.setattr(stab, "MAX_CONDITION", 1.0)
    with pytest.raises(StabilizationError):
        compute_tables(blocks(3, 6))


def test_sigma_missing_is_configuration_error():
    t = compute_tables(blocks(2, 4), with_sigma=False)
    with pytest.raises(ConfigurationError):
        sigma_matrix(t, blocks(2, 4).D)


def test_su_theta_one_is_ncsu_plus_outflow_term():
    disc = TimeDiscretization(get_problem("smooth_advection"), 3, 16)
    theta = ThetaField.constant(disc.theta_axes(), 1.0)
    A, _ = su_operators(disc, disc.table, theta)
    N = ncsu_matrix(disc.table, disc.blocks.D)
    rows = disc.table.fallback_rows == 0
    diff = (A - N).toarray()
    assert np.abs(diff[rows]).max() <= 1e-12 * abs(N).max()
    last = disc.h / 2 * disc.blocks.D[1].toarray()[-1]
    np.testing.assert_allclose(diff[-1], last, atol=1e-13)


def test_su_theta_zero_is_consistent_for_exact_polynomial():
    # with theta = 0 the SU terms are residual based: u = t (f = 1) solves them exactly
    prob = get_problem("custom", kind="advection", forcing="1", exact="t")
    disc = TimeDiscretization(prob, 2, 8)
    sys_ = assemble_system(disc, "su", ThetaField.constant(disc.theta_axes(), 0.0))
    u = np.linalg.solve(sys_.matrix.toarray(), sys_.rhs)
    np.testing.assert_allclose(disc.evaluate(u, np.linspace(0, 1, 11)), np.linspace(0, 1, 11),
                               atol=1e-12)


def test_heat_su_factors_match_operator():
    disc = HeatDiscretization(get_problem("heat_interval"), 2, 6)
    theta = ThetaField.constant(disc.theta_axes(), 1.0)
    A, _ = su_operators(disc, disc.table, theta)
    full = kron_matrix(disc.galerkin_pairs()) + A
    fac = su_time_factors(disc.table, disc.blocks)
    K = kron_matrix(fac)
    assert abs(full - K).max() <= 1e-12 * abs(K).max()
    for T, _ in fac:
        assert strict_upper(sp.csr_matrix(T)) <= 1e-12 * max(abs(T).max(), 1e-300)


def test_heat_su_variable_theta_matches_constant_path():
    # a spatially varying theta that happens to be constant must give the same matrix
    disc = HeatDiscretization(get_problem("heat_interval"), 2, 4)
    axes = disc.theta_axes()
    for c in (0.0, 0.3, 1.0):
        th = ThetaField.constant(axes, c)
        A1, F1 = su_operators(disc, disc.table, th)
        A2, F2 = su_operators(disc, disc.table, _NonConstant(axes, th.values.copy()))
        assert abs(A1 - A2).max() <= 1e-11 * abs(A1).max()
        np.testing.assert_allclose(F1, F2, atol=1e-11 * max(np.abs(F1).max(), 1))


class _NonConstant(ThetaField):
    # forces the cell-wise assembly path
    @property
    def is_constant(self):
        return False


def test_theta_field_interpolates_bilinearly():
    axes = [np.array([0.0, 1.0]), np.array([0.0, 0.5, 1.0])]
    vals = np.array([[0.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    th = ThetaField(axes, vals)
    assert th(0.5, 0.25) == pytest.approx(0.5 * 0.5 + 0.5 * 1.0)
    grid = th.evaluate_grid([np.array([0.5]), np.array([0.25, 0.75])])
    np.testing.assert_allclose(grid, [[0.75, 0.75]])
    with pytest.raises(ValueError):
        ThetaField(axes, np.zeros((3, 3)))


def test_compute_theta_clips_and_handles_zero_scale():
    axes = [np.array([0.0, 0.5, 1.0])]
    th = compute_theta(np.array([0.0, 1.0, 5.0]), 2.0, axes)
    np.testing.assert_allclose(th.values, [0.0, 0.5, 1.0])
    assert compute_theta(np.zeros(3), 0.0, axes).values.min() == 1.0


def test_window_max_uses_neighbouring_cells():
    kv = make_open_uniform_knots(1, 4)
    pts, cells = sample_axis(kv)
    vals = np.zeros(pts.size)
    vals[np.argmin(np.abs(pts - 0.6))] = -3.0  # inside cell 2 = [0.5, 0.75]
    w = window_max(vals, [cells])
    np.testing.assert_allclose(w, [0.0, 0.0, 3.0, 3.0, 0.0])


def test_sample_axis_covers_cells():
    kv = make_open_uniform_knots(3, 5)
    pts, cells = sample_axis(kv)
    assert pts[0] == 0.0 and pts[-1] == 1.0
    for c, sl in enumerate(cells):
        seg = pts[sl]
        assert seg[0] == pytest.approx(c / 5) and seg[-1] == pytest.approx((c + 1) / 5)


def test_table_csv(tmp_path):
    kv = make_open_uniform_knots(2, 5)
    t = compute_tables(blocks(2, 5))
    g = np.linspace(0, 1, t.N_t)
    write_table_csv(tmp_path / "s.csv", t, g)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "i,k,greville_i,tau,sigma,cond"
    assert len(lines) - 1 == int(t.active_length.sum())
