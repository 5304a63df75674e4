import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spline_upwind.errors import ParameterError
from spline_upwind.metrics import (CONVERGENCE_COLUMNS, estimate_orders, fitted_order, l2_norm,
                                   overshoot_from_samples, overshoot_indicator,
                                   relative_l2_error, sample_points, write_convergence_csv)
from spline_upwind.splines import make_open_uniform_knots

KV = make_open_uniform_knots(2, 8)


def test_l2_norm_exact_for_polynomials():
    assert l2_norm(lambda t: t, KV) == pytest.approx(np.sqrt(1 / 3), rel=1e-14)
    assert l2_norm(lambda t: t, KV, region=(0.5, 1.0)) == pytest.approx(np.sqrt(7 / 24), rel=1e-14)


def test_region_clipping_inside_a_span():
    # [0.3, 0.4] cuts spans [0.25, 0.375] and [0.375, 0.5]
    val = l2_norm(lambda t: np.ones_like(t), KV, region=(0.3, 0.4))
    assert val == pytest.approx(np.sqrt(0.1), rel=1e-13)


def test_relative_error():
    err = relative_l2_error(lambda t: 1.1 * t, lambda t: t, KV)
    assert err == pytest.approx(0.1, rel=1e-12)
    with pytest.raises(ParameterError):
        relative_l2_error(lambda t: t, lambda t: 0 * t, KV)
    with pytest.raises(ParameterError):
        relative_l2_error(lambda t: t, lambda t: t, KV, region=(0.5, 0.5))
    with pytest.raises(ParameterError):
        relative_l2_error(lambda t: t, lambda t: t, KV, region=(2.0, 3.0))


def test_overshoot():
    assert overshoot_from_samples([0.0, 1.2, -0.1], [0.0, 1.0, 0.5]) == pytest.approx(0.3)
    assert overshoot_from_samples([0.2, 0.9], [0.0, 1.0]) == 0.0
    val = overshoot_indicator(lambda t: 1.5 * t, lambda t: t, KV, region=(0.0, 0.5))
    assert val == pytest.approx(0.25)


def test_sample_points_per_cell():
    pts = sample_points(KV, per_cell=3)
    assert pts.size == 8 * 2 + 1
    assert pts[0] == 0.0 and pts[-1] == 1.0


def test_estimate_orders_exact_rates():
    h = np.array([0.5, 0.25, 0.125])
    rec = estimate_orders(h, 3 * h ** 4, degree=3)
    np.testing.assert_allclose(rec.orders, 4.0)
    assert rec.fitted_order() == pytest.approx(4.0)


def test_estimate_orders_zero_error_flag():
    rec = estimate_orders([0.5, 0.25, 0.125], [1e-3, 0.0, 1e-5])
    assert np.isnan(rec.orders).all()
    assert rec.undefined.all()


def test_estimate_orders_errors():
    with pytest.raises(ParameterError):
        estimate_orders([0.5], [1.0])
    with pytest.raises(ParameterError):
        estimate_orders([0.25, 0.5], [1.0, 2.0])
    with pytest.raises(ParameterError):
        fitted_order([0.5], [1.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 8.0), st.floats(1e-3, 1e3), st.integers(2, 6))
def test_orders_recover_power_law(rate, c, levels):
    h = 2.0 ** -np.arange(1, levels + 1)
    e = c * h ** rate
    rec = estimate_orders(h, e)
    tiny = (e[:-1] <= 1e-13) | (e[1:] <= 1e-13)
    np.testing.assert_array_equal(rec.undefined, tiny)
    np.testing.assert_allclose(rec.orders[~tiny], rate, rtol=1e-9)


def test_convergence_csv(tmp_path):
    rec = estimate_orders([0.5, 0.25], [1e-2, 2.5e-3], degree=1, num_dofs=[3, 5], wall_times=[0.1, 0.2])
    path = tmp_path / "errors.csv"
    write_convergence_csv(path, [rec])
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == CONVERGENCE_COLUMNS
    assert rows[1][4] == "" and float(rows[2][4]) == pytest.approx(2.0)
    assert rows[1][5] == ""
    write_convergence_csv(path, [rec], include_times=True)
    assert float(list(csv.reader(open(path)))[2][5]) == 0.2
