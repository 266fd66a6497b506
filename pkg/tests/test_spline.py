import numpy as np
import pytest
from hypothesis import given, strategies as st

from latentjm.errors import InvalidDegree, InvalidKnots, OutOfDomain
from latentjm.spline import BasisSpec, build_basis, eval_basis


def gram_by_quadrature(basis, n_points=64):
    """Orthonormal-basis Gram matrix on the transformed axis, computed independently."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    breaks = np.unique(basis.knot_vector)
    G = np.zeros((basis.q, basis.q))
    for a, b in zip(breaks[:-1], breaks[1:]):
        u = 0.5 * (a + b) + 0.5 * (b - a) * x
        t = u if basis.spec.time_transform == "identity" else np.expm1(u)
        B = basis(t)
        G += (B * (0.5 * (b - a) * w)[:, None]).T @ B
    return G


def test_dimension_formula():
    assert BasisSpec.evenly_spaced(8, (0, 9)).q == 12
    assert build_basis(BasisSpec.evenly_spaced(8, (0, 9))).q == 12
    assert build_basis(BasisSpec(degree=2, interior_knots=(0.3,), domain=(0, 1))).q == 4


def test_constant_basis():
    basis = build_basis(BasisSpec(degree=0, interior_knots=(), domain=(0.0, 1.0)))
    assert basis.q == 1
    np.testing.assert_allclose(basis(np.linspace(0, 1, 7)), np.ones((7, 1)), atol=1e-14)


@pytest.mark.parametrize("n_knots", range(2, 13))
def test_gram_identity_evenly_spaced(n_knots):
    basis = build_basis(BasisSpec.evenly_spaced(n_knots, (0.0, 9.0)))
    assert np.abs(gram_by_quadrature(basis) - np.eye(basis.q)).max() < 1e-8


def test_gram_identity_log_time():
    basis = build_basis(BasisSpec.evenly_spaced(6, (0.0, 9.0), time_transform="log1p"))
    assert np.abs(gram_by_quadrature(basis) - np.eye(basis.q)).max() < 1e-8
    # knots are even on the log axis
    u = np.log1p(np.asarray(basis.spec.interior_knots))
    np.testing.assert_allclose(np.diff(u), np.diff(u)[0])


def test_partition_of_unity():
    basis = build_basis(BasisSpec.evenly_spaced(5, (0.0, 3.0)))
    t = np.linspace(0, 3, 31)
    np.testing.assert_allclose(basis.raw(t).sum(axis=1), 1.0, atol=1e-12)


def test_continuity_across_knots():
    basis = build_basis(BasisSpec.evenly_spaced(4, (0.0, 5.0)))
    eps = 1e-9
    for k in basis.spec.interior_knots:
        lo, hi = basis([k - eps]), basis([k + eps])
        assert np.abs(lo - hi).max() < 1e-7
        # first derivative by one-sided differences is continuous too
        h = 1e-5
        dl = (basis([k]) - basis([k - h])) / h
        dr = (basis([k + h]) - basis([k])) / h
        assert np.abs(dl - dr).max() < 1e-3


def test_domain_ends_and_errors():
    basis = build_basis(BasisSpec.evenly_spaced(3, (0.0, 2.0)))
    assert basis([0.0, 2.0]).shape == (2, basis.q)
    assert np.all(np.isfinite(basis([2.0])))
    with pytest.raises(OutOfDomain):
        basis([2.1])
    with pytest.raises(OutOfDomain):
        eval_basis(basis, [-0.5])


@pytest.mark.parametrize("spec", [
    BasisSpec(interior_knots=(0.5, 0.4), domain=(0, 1)),
    BasisSpec(interior_knots=(0.5, 0.5), domain=(0, 1)),
    BasisSpec(interior_knots=(1.0,), domain=(0, 1)),
    BasisSpec(interior_knots=(-0.1,), domain=(0, 1)),
    BasisSpec(domain=(1, 1)),
])
def test_invalid_knots(spec):
    with pytest.raises(InvalidKnots):
        build_basis(spec)


def test_invalid_degree():
    with pytest.raises(InvalidDegree):
        build_basis(BasisSpec(degree=-1, domain=(0, 1)))


def test_roundtrip_dict():
    spec = BasisSpec.evenly_spaced(4, (0.0, 9.0), time_transform="log1p")
    assert BasisSpec.from_dict(spec.to_dict()) == spec
    again = BasisSpec.from_dict({"n_knots": 4, "domain": [0, 9], "time_transform": "log1p"})
    np.testing.assert_allclose(again.interior_knots, spec.interior_knots)


@given(st.lists(st.floats(0.05, 0.95), min_size=0, max_size=6, unique=True),
       st.integers(1, 4))
def test_gram_identity_random_knots(knots, degree):
    knots = sorted(knots)
    if len(knots) > 1 and np.min(np.diff(knots)) < 1e-3:
        return
    basis = build_basis(BasisSpec(degree=degree, interior_knots=tuple(knots), domain=(0.0, 1.0)))
    assert np.abs(gram_by_quadrature(basis, 16) - np.eye(basis.q)).max() < 1e-8


@given(st.lists(st.floats(-3, 3), min_size=7, max_size=7))
def test_linear_span_invariance(coef):
    basis = build_basis(BasisSpec.evenly_spaced(3, (0.0, 4.0)))
    c = np.asarray(coef)
    c_ortho = np.linalg.solve(basis.gram_root_inverse, c)
    t = np.linspace(0, 4, 23)
    np.testing.assert_allclose(basis(t) @ c_ortho, basis.raw(t) @ c, atol=1e-9)
    # the BSpline export agrees with the matrix evaluation
    np.testing.assert_allclose(basis.spline(c_ortho)(t), basis.raw(t) @ c, atol=1e-9)
