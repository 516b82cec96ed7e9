"""Displacement, deformation gradient and Green-Lagrange strain from RK coefficients.

Coefficient fields are plain ``(n_centers, 2)`` arrays. Displacement
gradients follow ``grad_u[..., i, j] = d u_i / d x_j``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class DisplacementField:
    u: np.ndarray
    grad_u: np.ndarray


@dataclass(frozen=True)
class StrainField:
    E11: np.ndarray
    E12: np.ndarray
    E22: np.ndarray
    principal_min: np.ndarray
    principal_max: np.ndarray

    def tensor(self):
        """Full ``(N, 2, 2)`` strain tensors."""
        return np.stack([np.stack([self.E11, self.E12], -1),
                         np.stack([self.E12, self.E22], -1)], -2)


def check_coefficients(coeffs, n_centers):
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (n_centers, 2):
        raise InvalidParameterError(
            f"coefficient field has shape {coeffs.shape}, expected ({n_centers}, 2)")
    if not np.all(np.isfinite(coeffs)):
        raise InvalidParameterError("coefficient field contains non-finite values")
    return coeffs


def reconstruct_displacement(coeffs, basis):
    """Evaluate ``u`` and ``grad u`` at the basis' points."""
    coeffs = check_coefficients(coeffs, basis.n_centers)
    u = basis.shape_matrix @ coeffs
    g1 = basis.grad_matrices[0] @ coeffs
    g2 = basis.grad_matrices[1] @ coeffs
    grad_u = np.stack([g1, g2], axis=-1)
    return DisplacementField(u, grad_u)


def green_lagrange(grad_u):
    """``E = (grad_u + grad_u^T + grad_u^T grad_u) / 2``; accepts ``(..., 2, 2)``."""
    F = np.asarray(grad_u, dtype=float)
    Ft = np.swapaxes(F, -1, -2)
    E = 0.5 * (F + Ft + Ft @ F)
    # exact symmetry regardless of rounding in the product
    return 0.5 * (E + np.swapaxes(E, -1, -2))


def principal_strains(E):
    """Closed-form eigenvalues ``(min, max)`` of symmetric 2x2 tensors."""
    E = np.asarray(E, dtype=float)
    a, b, d = E[..., 0, 0], E[..., 0, 1], E[..., 1, 1]
    mean = 0.5 * (a + d)
    radius = np.hypot(0.5 * (a - d), b)
    lo, hi = mean - radius, mean + radius
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def strain_from_gradient(grad_u):
    E = green_lagrange(grad_u)
    lo, hi = principal_strains(E)
    return StrainField(E[..., 0, 0], E[..., 0, 1], E[..., 1, 1], np.asarray(lo), np.asarray(hi))


def strain_field(coeffs, basis, points=None):
    """Green-Lagrange strain of the RK reconstruction.

    Evaluated at the basis' own points unless ``points`` is given.
    """
    if points is not None:
        basis = basis.at(points)
    return strain_from_gradient(reconstruct_displacement(coeffs, basis).grad_u)


def finite_difference_gradient(u, shape, spacing):
    """Displacement gradient of nodal data on a row-major grid.

    Central differences inside, one-sided on the edges. ``shape`` is
    ``(n1, n2)`` with x1 varying fastest.
    """
    n1, n2 = shape
    U = np.asarray(u, dtype=float).reshape(n2, n1, 2)
    grad = np.empty((n2, n1, 2, 2))
    for i in range(2):
        d_dx2, d_dx1 = np.gradient(U[..., i], spacing, spacing)
        grad[..., i, 0] = d_dx1
        grad[..., i, 1] = d_dx2
    return grad.reshape(n1 * n2, 2, 2)


def finite_difference_strain(u, shape, spacing):
    """Raw strain from nodal displacements, no smoothing."""
    return strain_from_gradient(finite_difference_gradient(u, shape, spacing))
