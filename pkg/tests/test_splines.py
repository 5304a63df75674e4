import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from spline_upwind.errors import DomainError, ParameterError
from spline_upwind.splines import (KnotVector, SplineSpace, basis_ders, basis_matrix,
                                   delinearize_index, eval_basis, find_spans, greville_abscissae,
                                   knots_from_breakpoints, linearize_index,
                                   make_open_uniform_knots)


def scipy_basis(kv, x, deriv=0):
    """Dense collocation matrix from scipy's B-spline implementation."""
    n = kv.n
    out = np.zeros((np.size(x), n))
    if deriv > kv.degree:
        return out
    for i in range(n):
        c = np.zeros(n)
        c[i] = 1.0
        spl = BSpline(kv.knots, c, kv.degree, extrapolate=False)
        out[:, i] = spl.derivative(deriv)(x) if deriv else spl(x)
    # scipy leaves the right end point undefined for the last function
    return np.nan_to_num(out)


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("deriv", [0, 1, 2])
def test_basis_matches_scipy(p, deriv):
    kv = knots_from_breakpoints(p, [0.0, 0.1, 0.35, 0.4, 0.8, 1.0])
    x = np.linspace(0.0, 1.0, 57)[:-1]
    B = basis_matrix(kv, x, deriv).toarray()
    np.testing.assert_allclose(B, scipy_basis(kv, x, deriv), atol=1e-9 * 10 ** deriv)


def test_partition_of_unity_and_right_end():
    kv = make_open_uniform_knots(3, 7)
    x = np.linspace(0, 1, 101)
    B = basis_matrix(kv, x).toarray()
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-14)
    assert B[-1, -1] == pytest.approx(1.0)
    assert B[0, 0] == pytest.approx(1.0)


def test_derivatives_sum_to_zero():
    kv = make_open_uniform_knots(4, 5, (0.0, 2.0))
    x = np.linspace(0, 2, 33)
    _, ders = basis_ders(kv, x, 3)
    np.testing.assert_allclose(ders[:, 1:].sum(axis=-1), 0.0, atol=1e-9)


def test_derivative_above_degree_is_zero():
    kv = make_open_uniform_knots(2, 4)
    _, ders = basis_ders(kv, [0.1, 0.6], 4)
    assert np.all(ders[:, 3:] == 0.0)


def test_eval_basis_single_point():
    kv = make_open_uniform_knots(2, 4)
    idx, table = eval_basis(kv, 0.3, 1)
    np.testing.assert_array_equal(idx, [1, 2, 3])
    B = basis_matrix(kv, [0.3]).toarray()[0]
    np.testing.assert_allclose(table[0], B[idx])


def test_find_spans_and_domain():
    kv = make_open_uniform_knots(2, 4)
    np.testing.assert_array_equal(find_spans(kv, [0.0, 0.25, 0.5, 1.0]), [2, 3, 4, 5])
    with pytest.raises(DomainError):
        find_spans(kv, [1.1])


def test_knot_vector_validation():
    with pytest.raises(ParameterError):
        KnotVector(0, [0, 1])
    with pytest.raises(ParameterError):
        KnotVector(2, [0, 0, 0.5, 1, 1, 1])  # not open at the left
    with pytest.raises(ParameterError):
        KnotVector(1, [0, 0, 0.6, 0.4, 1, 1])
    with pytest.raises(ParameterError):
        make_open_uniform_knots(2, 0)
    with pytest.raises(ParameterError):
        knots_from_breakpoints(2, [0.0, 0.5, 1.0], multiplicity=3)


def test_knot_vector_properties():
    kv = knots_from_breakpoints(3, [0.0, 0.2, 0.6, 1.0])
    assert kv.n == 6
    assert kv.num_elements == 3
    assert kv.h == pytest.approx(0.4)
    assert kv.alpha == pytest.approx(0.5)
    np.testing.assert_array_equal(kv.element_spans, [3, 4, 5])


def test_greville_reproduces_linear_function():
    kv = knots_from_breakpoints(3, [0.0, 0.1, 0.5, 0.7, 1.0])
    g = greville_abscissae(kv)
    x = np.linspace(0, 1, 21)
    np.testing.assert_allclose(basis_matrix(kv, x) @ g, x, atol=1e-14)


def test_spline_space_constraints():
    kv = make_open_uniform_knots(2, 4)
    assert SplineSpace.time(kv).drop == (0,)
    d = SplineSpace.dirichlet(kv)
    assert d.drop == (0, kv.n - 1)
    assert d.dim == kv.n - 2
    np.testing.assert_array_equal(d.full_to_constrained, [-1, 0, 1, 2, 3, -1])
    np.testing.assert_array_equal(d.expand([1, 2, 3, 4]), [0, 1, 2, 3, 4, 0])
    B = basis_matrix(kv, [0.0, 1.0], space=d).toarray()
    np.testing.assert_allclose(B, 0.0)


def test_linear_index_colex():
    dims = (3, 4, 5)
    assert linearize_index((1, 2, 3), dims) == 1 + 3 * 2 + 12 * 3
    assert linearize_index((1, 1, 1), dims, base=1) == 1
    with pytest.raises(IndexError):
        linearize_index((3, 0, 0), dims)
    with pytest.raises(IndexError):
        delinearize_index(60, dims)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=4).flatmap(
    lambda dims: st.tuples(st.just([d + 1 for d in dims]),
                           st.integers(0, int(np.prod([d + 1 for d in dims])) - 1))),
       st.sampled_from([0, 1]))
def test_linear_index_roundtrip(case, base):
    dims, lin = case
    idx = delinearize_index(lin + base, dims, base)
    assert linearize_index(idx, dims, base) == lin + base


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5),
       st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6),
       st.floats(0.0, 1.0))
def test_partition_of_unity_random_mesh(p, spans, s):
    breaks = np.concatenate([[0.0], np.cumsum(spans)])
    kv = knots_from_breakpoints(p, breaks)
    x = s * breaks[-1]
    B = basis_matrix(kv, [x]).toarray()
    assert B.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(B >= -1e-15)
