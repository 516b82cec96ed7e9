"""Reproducing-kernel shape functions on 2D point sets.

The shape function associated with kernel center ``x_I`` is

.. math::
    \\Phi_I(x) = H^T(x - x_I)\\, M(x)^{-1} H(0)\\, \\phi^a(x - x_I)

with ``H`` the monomials up to order ``n`` and ``M`` the moment matrix
``sum_I H(x - x_I) phi^a(x - x_I) H^T(x - x_I)``.  Internally the monomials
are evaluated on ``(x - x_I) / a``; this leaves ``Phi`` unchanged (the first
monomial is the constant) and keeps ``M`` well scaled for any length unit.

Monomial ordering is graded lexicographic: ``1, x, y, x^2, xy, y^2``.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import InvalidParameterError, SingularMomentError

CONDITION_LIMIT = 1e12


class WindowKind(str, Enum):
    CUBIC_BSPLINE = "cubic_bspline"


def n_monomials(n):
    """Number of 2D monomials of total degree <= n."""
    return (n + 1) * (n + 2) // 2


def _check_order(n):
    if n not in (0, 1, 2):
        raise InvalidParameterError(f"unsupported basis order {n!r}; expected 0, 1 or 2")


# -- window -----------------------------------------------------------------

def _bspline(s):
    s = np.asarray(s, dtype=float)
    w = np.zeros_like(s)
    inner = s < 0.5
    outer = (s >= 0.5) & (s < 1.0)
    si = s[inner]
    w[inner] = 2.0 / 3.0 - 4.0 * si**2 + 4.0 * si**3
    so = s[outer]
    w[outer] = 4.0 / 3.0 * (1.0 - so) ** 3
    return w


def _bspline_ds(s):
    s = np.asarray(s, dtype=float)
    dw = np.zeros_like(s)
    inner = s < 0.5
    outer = (s >= 0.5) & (s < 1.0)
    si = s[inner]
    dw[inner] = -8.0 * si + 12.0 * si**2
    so = s[outer]
    dw[outer] = -4.0 * (1.0 - so) ** 2
    return dw


def window_eval(r, a, window=WindowKind.CUBIC_BSPLINE):
    """Cubic B-spline window of support radius ``a`` evaluated at distance ``r``.

    Returns a float for scalar input, an array otherwise.
    """
    if not a > 0:
        raise InvalidParameterError(f"support size must be positive, got {a!r}")
    if WindowKind(window) is not WindowKind.CUBIC_BSPLINE:
        raise InvalidParameterError(f"unknown window {window!r}")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise InvalidParameterError("distance must be non-negative")
    w = _bspline(r / a)
    return float(w) if w.ndim == 0 else w


def window_derivative(r, a):
    """Radial derivative d(phi^a)/dr."""
    if not a > 0:
        raise InvalidParameterError(f"support size must be positive, got {a!r}")
    r = np.asarray(r, dtype=float)
    dw = _bspline_ds(r / a) / a
    return float(dw) if dw.ndim == 0 else dw


# -- monomials --------------------------------------------------------------

def monomial_basis(d, n):
    """Monomials of ``d`` (shape ``(..., 2)``) up to total degree ``n``.

    >>> monomial_basis([2.0, -3.0], 2).tolist()
    [1.0, 2.0, -3.0, 4.0, -6.0, 9.0]
    """
    _check_order(n)
    d = np.asarray(d, dtype=float)
    x, y = d[..., 0], d[..., 1]
    one = np.ones_like(x)
    terms = [one]
    if n >= 1:
        terms += [x, y]
    if n >= 2:
        terms += [x * x, x * y, y * y]
    return np.stack(terms, axis=-1)


def monomial_gradient(d, n):
    """Derivatives of :func:`monomial_basis` w.r.t. ``d``; shape ``(..., m, 2)``."""
    _check_order(n)
    d = np.asarray(d, dtype=float)
    x, y = d[..., 0], d[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [(zero, zero)]
    if n >= 1:
        rows += [(one, zero), (zero, one)]
    if n >= 2:
        rows += [(2 * x, zero), (y, x), (zero, 2 * y)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


# -- grids ------------------------------------------------------------------

def uniform_points(shape, origin=(0.0, 0.0), extent=(1.0, 1.0)):
    """Row-major uniform grid, x1 varying fastest.

    ``shape`` is ``(n1, n2)`` (points along x1, x2); the grid spans
    ``origin`` to ``origin + extent`` inclusive.
    """
    n1, n2 = shape
    if n1 < 2 or n2 < 2:
        raise InvalidParameterError(f"grid needs at least 2 points per axis, got {shape}")
    x1 = origin[0] + np.linspace(0.0, extent[0], n1)
    x2 = origin[1] + np.linspace(0.0, extent[1], n2)
    X1, X2 = np.meshgrid(x1, x2, indexing="xy")
    return np.column_stack([X1.ravel(), X2.ravel()])


@dataclass(frozen=True)
class NodeGrid:
    """Measurement points and kernel centers.

    ``spacing`` is the measurement-grid spacing; ``center_spacing`` is the
    kernel-center spacing, which is the length unit support sizes are quoted
    in (``a = 3.1 * center_spacing``).
    """

    measurement_points: np.ndarray
    kernel_centers: np.ndarray
    spacing: float
    center_spacing: float
    shape: tuple = None
    center_shape: tuple = None
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        mp = np.ascontiguousarray(self.measurement_points, dtype=float)
        kc = np.ascontiguousarray(self.kernel_centers, dtype=float)
        for name, arr in (("measurement_points", mp), ("kernel_centers", kc)):
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise InvalidParameterError(f"{name} must have shape (N, 2)")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite coordinates")
            if len(np.unique(arr, axis=0)) != len(arr):
                raise InvalidParameterError(f"{name} are not distinct")
        if not (self.spacing > 0 and self.center_spacing > 0):
            raise InvalidParameterError("grid spacings must be positive")
        object.__setattr__(self, "measurement_points", mp)
        object.__setattr__(self, "kernel_centers", kc)

    @property
    def n_points(self):
        return len(self.measurement_points)

    @property
    def n_centers(self):
        return len(self.kernel_centers)

    @classmethod
    def uniform(cls, shape=(21, 21), center_shape=(10, 10), spacing=1.0, origin=(0.0, 0.0)):
        """Square-spaced measurement grid with kernel centers spanning the same box."""
        n1, n2 = shape
        extent = ((n1 - 1) * spacing, (n2 - 1) * spacing)
        pts = uniform_points(shape, origin, extent)
        c1, c2 = center_shape
        centers = uniform_points(center_shape, origin, extent)
        center_spacing = max(extent[0] / (c1 - 1), extent[1] / (c2 - 1))
        return cls(pts, centers, float(spacing), float(center_spacing),
                   tuple(shape), tuple(center_shape), tuple(map(float, origin)))

    def with_points(self, points, shape=None, spacing=None):
        """Same kernel centers, different evaluation points."""
        return NodeGrid(points, self.kernel_centers, spacing or self.spacing,
                        self.center_spacing, shape, self.center_shape, self.origin)


# -- moment matrix ----------------------------------------------------------

@dataclass(frozen=True)
class MomentMatrix:
    entries: np.ndarray
    condition: float


def moment_matrix(x, centers, a, n=1, point_index=0):
    """Moment matrix ``M(x)`` in physical (unscaled) monomials.

    ``centers`` may be a :class:`NodeGrid` or an ``(N, 2)`` array.
    """
    _check_order(n)
    if isinstance(centers, NodeGrid):
        centers = centers.kernel_centers
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("evaluation point must be finite")
    d = x - np.asarray(centers, dtype=float)
    r = np.hypot(d[:, 0], d[:, 1])
    inside = r < a
    m = n_monomials(n)
    if inside.sum() < m:
        raise SingularMomentError(point_index, f"{int(inside.sum())} center(s) in support, need {m}")
    H = monomial_basis(d[inside], n)
    phi = window_eval(r[inside], a)
    M = H.T @ (phi[:, None] * H)
    cond = float(np.linalg.cond(M))
    if not cond < CONDITION_LIMIT:
        raise SingularMomentError(point_index, f"condition estimate {cond:.3e}")
    return MomentMatrix(M, cond)


# -- shape functions ----------------------------------------------------------

def _shape_rows(points, centers, a, n, with_gradient=True):
    """Dense shape values (and x1/x2 gradients) at ``points``.

    Returns ``(Phi, dPhi1, dPhi2)``, each of shape ``(len(points), len(centers))``.
    Gradients include the derivative of the correction vector through
    ``d(M^-1) = -M^-1 dM M^-1``.
    """
    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    m = n_monomials(n)
    P, N = len(points), len(centers)
    Phi = np.zeros((P, N))
    dPhi = np.zeros((2, P, N)) if with_gradient else None
    h0 = np.zeros(m)
    h0[0] = 1.0
    bad = []
    reasons = []
    for p, x in enumerate(points):
        d = (x - centers) / a
        s = np.hypot(d[:, 0], d[:, 1])
        idx = np.flatnonzero(s < 1.0)
        if len(idx) < m:
            bad.append(p)
            reasons.append(f"{len(idx)} center(s) in support")
            continue
        dk = d[idx]
        sk = s[idx]
        H = monomial_basis(dk, n)
        phi = _bspline(sk)
        phiH = phi[:, None] * H
        M = H.T @ phiH
        cond = np.linalg.cond(M)
        if not cond < CONDITION_LIMIT:
            bad.append(p)
            reasons.append(f"condition estimate {cond:.3e}")
            continue
        try:
            cf = cho_factor(M, lower=True, check_finite=False)
        except LinAlgError:
            bad.append(p)
            reasons.append("not positive definite")
            continue
        b = cho_solve(cf, h0, check_finite=False)
        Hb = H @ b
        Phi[p, idx] = Hb * phi
        if not with_gradient:
            continue
        # chain rule through d = (x - x_I)/a
        dH = monomial_gradient(dk, n) / a  # (k, m, 2)
        dphi_ds = _bspline_ds(sk)
        unit = np.zeros_like(dk)
        nz = sk > 0
        unit[nz] = dk[nz] / sk[nz, None]
        dphi = dphi_ds[:, None] * unit / a  # (k, 2)
        for j in range(2):
            dHj = dH[:, :, j]
            dMj = dHj.T @ phiH + phiH.T @ dHj + H.T @ (dphi[:, j, None] * H)
            dbj = -cho_solve(cf, dMj @ b, check_finite=False)
            dPhi[j, p, idx] = (H @ dbj) * phi + (dHj @ b) * phi + Hb * dphi[:, j]
    if bad:
        raise SingularMomentError(bad, reasons[0])
    return Phi, dPhi


def _centers_of(context):
    if isinstance(context, NodeGrid):
        return context.kernel_centers
    if isinstance(context, RKBasis):
        return context.centers
    return np.asarray(context, dtype=float)


def shape_function(x, center_index, context, a=None, n=1):
    """Value of one RK shape function at ``x``.

    ``context`` is an :class:`RKBasis` (support and order taken from it), a
    :class:`NodeGrid`, or an array of centers (then ``a`` is required).
    """
    if isinstance(context, RKBasis):
        a, n = context.support, context.order
    Phi, _ = _shape_rows(np.asarray(x, dtype=float), _centers_of(context), a, n, with_gradient=False)
    return float(Phi[0, center_index])


def shape_gradient(x, center_index, context, a=None, n=1):
    """Analytic spatial gradient of one RK shape function at ``x``."""
    if isinstance(context, RKBasis):
        a, n = context.support, context.order
    _, dPhi = _shape_rows(np.asarray(x, dtype=float), _centers_of(context), a, n)
    return dPhi[:, 0, center_index].copy()


@dataclass(frozen=True)
class RKBasis:
    """Shape functions and their gradients precomputed at a set of points.

    ``shape_matrix[J, I]`` is the I-th shape function at the J-th point and
    ``grad_matrices[k][J, I]`` its derivative along ``x_{k+1}``.
    """

    centers: np.ndarray
    support: float
    order: int
    window: WindowKind
    points: np.ndarray
    shape_matrix: np.ndarray
    grad_matrices: tuple
    grid: NodeGrid = field(default=None, repr=False, compare=False)

    @property
    def n_points(self):
        return self.shape_matrix.shape[0]

    @property
    def n_centers(self):
        return self.shape_matrix.shape[1]

    def evaluate(self, points):
        """Shape values and gradients at arbitrary points (same centers)."""
        Phi, dPhi = _shape_rows(points, self.centers, self.support, self.order)
        return Phi, (dPhi[0], dPhi[1])

    def at(self, points):
        """A new basis with identical centers, evaluated at ``points``."""
        points = np.ascontiguousarray(points, dtype=float)
        Phi, grads = self.evaluate(points)
        return RKBasis(self.centers, self.support, self.order, self.window,
                       points, Phi, grads, None)


def assemble_basis(grid, a, n=1, window=WindowKind.CUBIC_BSPLINE):
    """Precompute the shape matrix and gradient matrices on ``grid``'s measurement points.

    Raises
    ------
    SingularMomentError
        Listing every measurement point whose moment matrix is singular.
    """
    _check_order(n)
    if not a > 0:
        raise InvalidParameterError(f"support size must be positive, got {a!r}")
    window = WindowKind(window)
    Phi, dPhi = _shape_rows(grid.measurement_points, grid.kernel_centers, a, n)
    return RKBasis(grid.kernel_centers, float(a), n, window, grid.measurement_points,
                   Phi, (dPhi[0], dPhi[1]), grid)
