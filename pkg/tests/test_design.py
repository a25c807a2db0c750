import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirfactor.design import CovariateMatrix, Term, reference_effects, spline_basis
from dirfactor.errors import CovariateError


def cox_de_boor(x, t, k, i):
    """Basis function i of degree k on knot vector t, by the recursion."""
    if k == 0:
        last = t[i + 1] == t[-1] and t[i] < t[i + 1]
        return 1.0 if (t[i] <= x < t[i + 1]) or (last and x == t[-1]) else 0.0
    out = 0.0
    if t[i + k] > t[i]:
        out += (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(x, t, k - 1, i)
    if t[i + k + 1] > t[i + 1]:
        out += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(x, t, k - 1, i + 1)
    return out


KNOTS = (-1.0, 0.0, 1.0)
BOUND = (-2.0, 2.0)
FULL = [-2.0] * 4 + list(KNOTS) + [2.0] * 4


def test_basis_width():
    assert spline_basis([0.3], 3, KNOTS, BOUND).shape == (7, 1)


def test_basis_matches_recursion():
    xs = np.linspace(-2, 2, 41)
    B = spline_basis(xs, 3, KNOTS, BOUND)
    for j, x in enumerate(xs):
        ref = [cox_de_boor(x, FULL, 3, i) for i in range(7)]
        np.testing.assert_allclose(B[:, j], ref, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.floats(-2, 2))
def test_partition_of_unity(x):
    B = spline_basis([x], 3, KNOTS, BOUND)
    assert abs(B.sum() - 1) < 1e-12
    assert np.all(B >= -1e-14)


def test_out_of_range_raises():
    with pytest.raises(ValueError, match="outside boundary"):
        spline_basis([2.5], 3, KNOTS, BOUND)
    assert spline_basis([2.5], 3, KNOTS, BOUND, extrapolate=True).shape == (7, 1)


def test_bad_knots():
    with pytest.raises(ValueError):
        spline_basis([0.0], 3, (3.0,), BOUND)


def test_basis_derivative_finite_difference():
    xs = np.linspace(-1.9, 1.9, 17)
    h = 1e-6
    D = spline_basis(xs, 3, KNOTS, BOUND, derivative=1)
    fd = (spline_basis(xs + h, 3, KNOTS, BOUND) - spline_basis(xs - h, 3, KNOTS, BOUND)) / (2 * h)
    np.testing.assert_allclose(D, fd, atol=1e-6)


def make_cov():
    rng = np.random.default_rng(0)
    raw = np.vstack([rng.uniform(-1.5, 1.5, 12), rng.integers(0, 2, 12)])
    terms = [Term("linear", ("w1",)), Term("linear", ("w2",), binary=True),
             Term("interaction", ("w1", "w2")),
             Term("spline", ("w1",), knots=KNOTS, boundary=BOUND)]
    return CovariateMatrix(raw, ["w1", "w2"], terms)


def test_design_layout():
    cov = make_cov()
    assert cov.n_design == 10
    assert cov.design.shape == (10, 12)
    np.testing.assert_array_equal(cov.design[2], cov.raw[0] * cov.raw[1])
    assert cov.rows_for(0) == [0, 3, 4, 5, 6, 7, 8, 9]
    assert cov.rows_for(1) == [1]
    assert cov.design_names[2] == "w1*w2"


def test_jacobian_finite_difference():
    cov = make_cov()
    h = 1e-6
    for l in range(2):
        e = np.zeros((2, 1))
        e[l] = h
        J = cov.jacobian(cov.raw, l)
        fd = (cov.expand(cov.raw + e) - cov.expand(cov.raw - e)) / (2 * h)
        np.testing.assert_allclose(J, fd, atol=1e-6)


def test_expand_point_matches_column():
    cov = make_cov()
    np.testing.assert_allclose(cov.expand_point(cov.raw[:, 3]), cov.design[:, 3])


def test_binary_column_checks():
    with pytest.raises(CovariateError, match="subtract 1"):
        CovariateMatrix([[1, 2, 2, 1]], ["sex"], [Term("linear", ("sex",), binary=True)])
    with pytest.raises(CovariateError):
        CovariateMatrix([[0, 0.5]], ["x"], [Term("linear", ("x",), binary=True)])
    cov = CovariateMatrix([[0, 1, 1], [0.2, 0.3, 0.1]], ["b", "c"])
    assert cov.is_binary(0) and not cov.is_binary(1)


def test_term_round_trip():
    for t in make_cov().terms:
        assert Term.from_dict(t.to_dict()) == t
    with pytest.raises(CovariateError):
        Term.from_dict({"kind": "cubic", "column": "w"})
    with pytest.raises(CovariateError):
        Term.from_dict({"kind": "linear", "column": "w", "colour": 1})


def test_unknown_column():
    with pytest.raises(CovariateError):
        CovariateMatrix([[0.0, 1.0]], ["a"], [Term("linear", ("b",))])
    cov = CovariateMatrix([[0.0, 1.0]], ["a"])
    with pytest.raises(CovariateError):
        cov.resolve("b")
    assert cov.resolve("a") == 0


def test_reference_effects():
    v = reference_effects(100)
    assert v.shape == (3, 100)
    assert (v[0, 0], v[1, 0], v[2, 0], v[0, 8]) == (5, 5, 10, -5)
    assert np.all(v[:, 16:] == 0)
    assert np.count_nonzero(v[0]) == 16
    with pytest.raises(ValueError):
        reference_effects(10)
