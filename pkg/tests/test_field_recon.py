import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgsmooth import data_io
from pgsmooth.errors import InvalidParameterError
from pgsmooth.field_recon import (
    finite_difference_gradient, green_lagrange, principal_strains,
    reconstruct_displacement, strain_field,
)
from pgsmooth.pgs_opt import analytic_fit


def rotation(t):
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def test_zero_coefficients(basis):
    f = reconstruct_displacement(np.zeros((100, 2)), basis)
    assert not f.u.any() and not f.grad_u.any()
    s = strain_field(np.zeros((100, 2)), basis)
    assert not s.E11.any() and not s.E12.any() and not s.E22.any()


def test_affine_reproduction(grid, basis):
    A = np.array([[0.03, -0.01], [0.02, 0.05]])
    c0 = np.array([0.1, -0.2])
    coeffs = grid.kernel_centers @ A.T + c0
    f = reconstruct_displacement(coeffs, basis)
    assert np.abs(f.u - (grid.measurement_points @ A.T + c0)).max() < 1e-9
    assert np.abs(f.grad_u - A).max() < 1e-9


def test_quadratic_matches_direct_sum(grid, basis):
    c = grid.kernel_centers
    coeffs = np.column_stack([c[:, 0] ** 2, c[:, 0] * c[:, 1]])
    u = reconstruct_displacement(coeffs, basis).u
    ref = np.zeros_like(u)
    for J in range(basis.n_points):
        for I in range(basis.n_centers):
            ref[J] += basis.shape_matrix[J, I] * coeffs[I]
    assert np.abs(u - ref).max() < 1e-12
    x = grid.measurement_points
    # order-one reproduction does not recover the quadratic itself
    assert np.abs(u[:, 0] - x[:, 0] ** 2).max() > 1e-3


def test_green_lagrange_examples():
    assert not green_lagrange(np.zeros((2, 2))).any()
    E = green_lagrange(rotation(0.3) - np.eye(2))
    assert np.abs(E).max() < 1e-12
    E = green_lagrange(np.diag([0.1, -0.05]))
    assert np.allclose(E, np.diag([0.105, -0.04875]), rtol=0, atol=1e-15)


def test_principal_examples():
    assert principal_strains(np.diag([0.105, -0.04875])) == pytest.approx((-0.04875, 0.105), abs=1e-15)
    assert principal_strains(np.array([[0.0, 0.1], [0.1, 0.0]])) == pytest.approx((-0.1, 0.1), abs=1e-15)


def test_principal_matches_characteristic_roots(rng):
    for _ in range(200):
        a, b, d = rng.normal(size=3)
        lo, hi = principal_strains(np.array([[a, b], [b, d]]))
        roots = np.sort(np.roots([1.0, -(a + d), a * d - b * b]).real)
        assert lo == pytest.approx(roots[0], abs=1e-12)
        assert hi == pytest.approx(roots[1], abs=1e-12)


def test_uniform_stretch_strain(grid, basis):
    s = strain_field(0.01 * grid.kernel_centers, basis)
    expected = 0.01 + 0.5 * 0.0001
    assert np.abs(s.E11 - expected).max() < 1e-9
    assert np.abs(s.E22 - expected).max() < 1e-9
    assert np.abs(s.E12).max() < 1e-9


def test_rigid_motion_objectivity(grid, basis):
    R = rotation(0.7)
    coeffs = grid.kernel_centers @ (R - np.eye(2)).T + [0.4, -1.3]
    s = strain_field(coeffs, basis)
    assert max(np.abs(s.E11).max(), np.abs(s.E12).max(), np.abs(s.E22).max()) < 1e-9


def test_strain_matches_dense_finite_difference(grid, basis):
    spec = data_io.SyntheticSpec(kind="trig", sigma=0.0)
    _, sample, _ = data_io.generate_synthetic(spec)
    coeffs = analytic_fit(basis, sample)
    pts = grid.measurement_points[(grid.measurement_points > 0.5).all(1)
                                  & (grid.measurement_points < 4.5).all(1)]
    h = grid.spacing / 10
    grad = np.empty((len(pts), 2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        up = basis.evaluate(pts + e)[0] @ coeffs
        um = basis.evaluate(pts - e)[0] @ coeffs
        grad[:, :, k] = (up - um) / (2 * h)
    E_fd = green_lagrange(grad)
    s = strain_field(coeffs, basis, pts)
    scale = np.abs(E_fd).max()
    assert np.abs(s.E11 - E_fd[:, 0, 0]).max() < 1e-4 * scale
    assert np.abs(s.E12 - E_fd[:, 0, 1]).max() < 1e-4 * scale
    assert np.abs(s.E22 - E_fd[:, 1, 1]).max() < 1e-4 * scale


def test_tensor_symmetry_and_ordering(basis, rng):
    coeffs = rng.normal(scale=0.1, size=(100, 2))
    s = strain_field(coeffs, basis)
    T = s.tensor()
    assert np.array_equal(T[:, 0, 1], T[:, 1, 0])
    assert np.all(s.principal_min <= s.principal_max)
    grad = reconstruct_displacement(coeffs, basis).grad_u
    assert np.array_equal(s.E12, green_lagrange(grad)[:, 0, 1])


def test_linearity(basis, rng):
    c1, c2 = rng.normal(size=(2, 100, 2))
    lhs = reconstruct_displacement(2.5 * c1 - 0.7 * c2, basis).u
    rhs = 2.5 * reconstruct_displacement(c1, basis).u - 0.7 * reconstruct_displacement(c2, basis).u
    assert np.abs(lhs - rhs).max() < 1e-12


def test_bad_coefficients(basis):
    with pytest.raises(InvalidParameterError):
        reconstruct_displacement(np.zeros((99, 2)), basis)
    bad = np.zeros((100, 2))
    bad[3, 1] = np.inf
    with pytest.raises(InvalidParameterError):
        reconstruct_displacement(bad, basis)


def test_finite_difference_gradient_affine(grid):
    A = np.array([[0.02, 0.01], [-0.03, 0.04]])
    u = grid.measurement_points @ A.T
    g = finite_difference_gradient(u, grid.shape, grid.spacing)
    assert np.allclose(g, A, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5), min_size=4, max_size=4))
def test_green_lagrange_properties(entries):
    F = np.array(entries).reshape(2, 2)
    E = green_lagrange(F)
    assert np.array_equal(E, E.T)
    C = (np.eye(2) + F).T @ (np.eye(2) + F)
    assert np.allclose(E, 0.5 * (C - np.eye(2)), atol=1e-14)
    lo, hi = principal_strains(E)
    assert lo <= hi
    assert lo + hi == pytest.approx(np.trace(E), abs=1e-13)
