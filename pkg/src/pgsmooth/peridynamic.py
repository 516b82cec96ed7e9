"""Quasi-static peridynamic operator on uniform 2D lattices.

For an ordinary, mobile material the internal force density is

    G[u](x) = sum_q ( t_x<xi> + t_q<-xi> ) D<xi> w(xi)

with ``xi = q - x``, deformed direction ``D = (xi + eta) / |xi + eta|``,
extension ``e = |xi + eta| - |xi|`` and midpoint quadrature weights ``w``
(nodal area times a partial-volume factor near the horizon edge).

The scalar force state ``t`` is supplied by a :class:`ForceStateModel`
together with the influence kernel ``omega`` and the fiber-angle field
``alpha``; the kernel sees bonds rotated by ``-alpha(x)``.

Fields are ``(N, 2)`` arrays over all lattice nodes (row-major, x1 fastest).
Nodes of the interaction collar carry boundary data; operator outputs are
returned only on the interior nodes ``horizon.interior``.
"""

from dataclasses import dataclass, field
import logging
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (DegenerateBondError, InvalidModelError, InvalidParameterError,
                     MissingBoundaryError, NonConvergenceError, ZeroDenominatorError)
from .rk_basis import uniform_points

logger = logging.getLogger(__name__)

COLLAPSE_TOL = 1e-14


# -- geometry -----------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    shape: tuple
    spacing: float
    origin: tuple = (0.0, 0.0)

    @property
    def points(self):
        n1, n2 = self.shape
        return uniform_points(self.shape, self.origin,
                              ((n1 - 1) * self.spacing, (n2 - 1) * self.spacing))

    @property
    def n_nodes(self):
        return self.shape[0] * self.shape[1]

    def index(self, i1, i2):
        return i2 * self.shape[0] + i1


def partial_volume(length, delta, h):
    """Fraction of a neighbor cell inside the horizon (linear in ``|xi|``)."""
    length = np.asarray(length, dtype=float)
    f = (delta + 0.5 * h - length) / h
    return np.where(length <= delta - 0.5 * h, 1.0, np.clip(f, 0.0, 1.0))


def horizon_offsets(delta, h):
    """Integer lattice offsets with ``0 < |xi| < delta``, in a fixed order."""
    k = int(np.ceil(delta / h))
    out = []
    for j in range(-k, k + 1):
        for i in range(-k, k + 1):
            r = h * np.hypot(i, j)
            if 0 < r < delta * (1 - 1e-12):
                out.append((i, j))
    return np.array(out, dtype=int).reshape(-1, 2)


@dataclass(frozen=True)
class Horizon:
    """Neighbor lists and bond quadrature weights on a lattice.

    ``neighbors[n, k]`` is the node reached from ``n`` along bond ``k``
    (``-1`` if off the lattice). ``interior`` lists the nodes where the
    operator is evaluated; all of them have every node within ``2 delta``
    on the lattice.
    """

    lattice: Lattice
    delta: float
    offsets: np.ndarray
    xi: np.ndarray
    lengths: np.ndarray
    weights: np.ndarray
    neighbors: np.ndarray
    interior: np.ndarray
    reach: int

    @classmethod
    def build(cls, lattice, delta=None, interior=None):
        """Set up bonds for ``lattice``.

        ``delta`` defaults to three lattice spacings. ``interior`` is a
        boolean mask (or index array) of nodes forming the domain; by
        default every node at least ``2 delta`` away from the lattice edge.
        """
        h = lattice.spacing
        delta = 3.0 * h if delta is None else float(delta)
        if not delta > h:
            raise InvalidParameterError(f"horizon {delta} must exceed the spacing {h}")
        offsets = horizon_offsets(delta, h)
        xi = offsets * h
        lengths = np.hypot(xi[:, 0], xi[:, 1])
        weights = h * h * partial_volume(lengths, delta, h)
        reach = int(np.abs(offsets).max())

        n1, n2 = lattice.shape
        I1, I2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="xy")
        I1, I2 = I1.ravel(), I2.ravel()
        J1 = I1[:, None] + offsets[None, :, 0]
        J2 = I2[:, None] + offsets[None, :, 1]
        inside = (J1 >= 0) & (J1 < n1) & (J2 >= 0) & (J2 < n2)
        neighbors = np.where(inside, J2 * n1 + J1, -1)

        layers = 2 * reach
        full = (I1 >= layers) & (I1 < n1 - layers) & (I2 >= layers) & (I2 < n2 - layers)
        if interior is None:
            mask = full
        else:
            interior = np.asarray(interior)
            mask = np.zeros(lattice.n_nodes, bool)
            mask[interior] = True
            lacking = np.flatnonzero(mask & ~full)
            if len(lacking):
                raise MissingBoundaryError(lacking)
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            raise InvalidParameterError("lattice too small: no node has full horizon coverage")
        return cls(lattice, delta, offsets, xi, lengths, weights, neighbors, idx, reach)

    @classmethod
    def with_collar(cls, interior_shape, spacing, delta=None, origin=(0.0, 0.0)):
        """Lattice made of an ``interior_shape`` block plus a ``2 delta`` collar.

        ``origin`` is the position of the first interior node.
        """
        delta = 3.0 * spacing if delta is None else float(delta)
        layers = 2 * int(np.abs(horizon_offsets(delta, spacing)).max())
        n1, n2 = interior_shape
        lat = Lattice((n1 + 2 * layers, n2 + 2 * layers), float(spacing),
                      (origin[0] - layers * spacing, origin[1] - layers * spacing))
        I1, I2 = np.meshgrid(np.arange(lat.shape[0]), np.arange(lat.shape[1]), indexing="xy")
        mask = ((I1 >= layers) & (I1 < layers + n1) & (I2 >= layers) & (I2 < layers + n2)).ravel()
        return cls.build(lat, delta, mask)

    @property
    def n_bonds(self):
        return len(self.offsets)

    @property
    def points(self):
        return self.lattice.points

    def neighbor_set(self, nodes):
        nb = self.neighbors[nodes].ravel()
        return np.union1d(nodes, nb[nb >= 0])

    def required_nodes(self):
        """Interior nodes plus everything within ``2 delta`` of them."""
        return self.neighbor_set(self.neighbor_set(self.interior))

    def cell_area(self):
        return self.lattice.spacing ** 2


# -- force-state models -------------------------------------------------------

def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_bond(xi, alpha):
    """``R(-alpha) xi`` for bond vectors ``(..., 2)`` and angles broadcastable to ``(...)``."""
    xi = np.asarray(xi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    c, s = np.cos(alpha), np.sin(alpha)
    x, y = xi[..., 0], xi[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def constant_kernel(delta):
    def omega(xi):
        r = np.hypot(xi[..., 0], xi[..., 1])
        return np.where(r < delta, 1.0, 0.0)
    return omega


def conical_kernel(delta):
    def omega(xi):
        r = np.hypot(xi[..., 0], xi[..., 1])
        return np.where(r < delta, 1.0 - r / delta, 0.0)
    return omega


KERNELS = {"constant": constant_kernel, "conical": conical_kernel}


def zero_angle(x):
    return np.zeros(np.shape(x)[:-1])


@dataclass(frozen=True)
class ForceStateModel:
    """Pluggable constitutive law.

    ``t(omega, theta, e, length)`` must accept broadcastable arrays.
    ``kind == "linear_bond"`` enables the analytic Newton Jacobian in
    :func:`solve_displacement`; it requires ``t = stiffness * omega * e / length``.
    """

    omega: Callable
    t: Callable
    alpha: Callable = zero_angle
    name: str = "custom"
    kind: str = "custom"
    params: dict = field(default_factory=dict)


def linear_bond_model(stiffness, delta, kernel="constant", alpha=None):
    """Bond-based linear model ``t = c * omega * e / |xi|``."""
    if kernel not in KERNELS:
        raise InvalidModelError(f"unknown kernel {kernel!r}")
    c = float(stiffness)

    def t(omega, theta, e, length):
        return c * omega * e / length

    return ForceStateModel(KERNELS[kernel](delta), t, alpha or zero_angle,
                           name="linear_bond", kind="linear_bond",
                           params={"stiffness": c, "delta": delta, "kernel": kernel})


def linear_state_model(stiffness, dilatation_modulus, delta, kernel="constant", alpha=None):
    """Linear state-based model ``t = a * theta * omega * |xi| + c * omega * e``."""
    if kernel not in KERNELS:
        raise InvalidModelError(f"unknown kernel {kernel!r}")
    c, a = float(stiffness), float(dilatation_modulus)

    def t(omega, theta, e, length):
        return a * theta * omega * length + c * omega * e

    return ForceStateModel(KERNELS[kernel](delta), t, alpha or zero_angle,
                           name="linear_state", kind="linear_state",
                           params={"stiffness": c, "dilatation_modulus": a,
                                   "delta": delta, "kernel": kernel})


MODELS = {"linear_bond": linear_bond_model, "linear_state": linear_state_model}


# -- bond kinematics ------------------------------------------------------------

@dataclass(frozen=True)
class BondStates:
    neighbors: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    extension: np.ndarray
    direction: np.ndarray


def _kinematics(u, horizon, nodes):
    """Bond states for every bond of ``nodes``; all neighbors must exist."""
    nbr = horizon.neighbors[nodes]
    if np.any(nbr < 0):
        bad = np.asarray(nodes)[np.any(nbr < 0, axis=1)]
        raise MissingBoundaryError(bad)
    xi = horizon.xi[None, :, :]
    eta = u[nbr] - u[nodes][:, None, :]
    Y = xi + eta
    ylen = np.hypot(Y[..., 0], Y[..., 1])
    collapsed = ylen < COLLAPSE_TOL * horizon.lengths[None, :]
    if np.any(collapsed):
        n, k = np.argwhere(collapsed)[0]
        raise DegenerateBondError(int(np.asarray(nodes)[n]), int(nbr[n, k]))
    e = ylen - horizon.lengths[None, :]
    D = Y / ylen[..., None]
    return nbr, np.broadcast_to(xi, eta.shape), eta, e, D, ylen


def bond_states(u, horizon, node):
    """Bond states of one node."""
    u = np.asarray(u, dtype=float)
    nbr, xi, eta, e, D, _ = _kinematics(u, horizon, np.array([node]))
    return BondStates(nbr[0], xi[0].copy(), eta[0], e[0], D[0])


def _check_field(u, horizon):
    u = np.asarray(u, dtype=float)
    if u.shape != (horizon.lattice.n_nodes, 2):
        raise InvalidParameterError(
            f"field has shape {u.shape}, expected ({horizon.lattice.n_nodes}, 2)")
    need = horizon.required_nodes()
    missing = need[~np.all(np.isfinite(u[need]), axis=1)]
    if len(missing):
        raise MissingBoundaryError(missing)
    return u


def _dilatation(e, horizon, model):
    om = model.omega(horizon.xi)
    w = horizon.weights
    den = np.sum(om * horizon.lengths**2 * w)
    if not den > 0:
        raise InvalidModelError("influence kernel gives a zero dilatation denominator")
    return (e * (om * horizon.lengths * w)[None, :]).sum(axis=1) / den


def dilatation(u, horizon, node, model):
    """Nonlocal dilatation at ``node`` (the kernel is not rotated here)."""
    u = np.asarray(u, dtype=float)
    _, _, _, e, _, _ = _kinematics(u, horizon, np.array([node]))
    return float(_dilatation(e, horizon, model)[0])


@dataclass
class _Evaluation:
    nbr: np.ndarray
    e: np.ndarray
    D: np.ndarray
    ylen: np.ndarray
    omega_x: np.ndarray
    omega_q: np.ndarray
    t_x: np.ndarray
    t_q: np.ndarray


def _evaluate(u, horizon, model):
    u = _check_field(u, horizon)
    nodes = horizon.interior
    ring = horizon.neighbor_set(nodes)
    # dilatation on interior nodes and their neighbors
    _, _, _, e_ring, _, _ = _kinematics(u, horizon, ring)
    theta = np.full(horizon.lattice.n_nodes, np.nan)
    theta[ring] = _dilatation(e_ring, horizon, model)

    nbr, xi, _, e, D, ylen = _kinematics(u, horizon, nodes)
    pts = horizon.points
    alpha_x = np.asarray(model.alpha(pts[nodes]), dtype=float)
    alpha_q = np.asarray(model.alpha(pts[nbr]), dtype=float)
    omega_x = model.omega(rotate_bond(xi, alpha_x[:, None]))
    omega_q = model.omega(rotate_bond(-xi, alpha_q))
    L = horizon.lengths[None, :]
    t_x = model.t(omega_x, theta[nodes][:, None], e, L)
    t_q = model.t(omega_q, theta[nbr], e, L)
    return _Evaluation(nbr, e, D, ylen, omega_x, omega_q,
                       np.asarray(t_x, dtype=float), np.asarray(t_q, dtype=float))


def apply_operator(u, horizon, model):
    """Internal force density ``G[u]`` at the interior nodes, shape ``(n_interior, 2)``."""
    ev = _evaluate(u, horizon, model)
    s = (ev.t_x + ev.t_q) * horizon.weights[None, :]
    return np.einsum("nk,nki->ni", s, ev.D)


def pairwise_forces(u, horizon, model):
    """Bond force densities ``f(x, q)`` for every interior bond.

    Returns ``(nodes, neighbors, forces)`` with ``forces[n, k]`` the force
    density that ``neighbors[n, k]`` exerts on ``nodes[n]`` (already
    multiplied by the quadrature weight).
    """
    ev = _evaluate(u, horizon, model)
    s = (ev.t_x + ev.t_q) * horizon.weights[None, :]
    return horizon.interior, ev.nbr, s[..., None] * ev.D


def average_pk1(u, horizon, model):
    """Spatial mean over interior nodes of ``P(x) = sum t_x D (x) xi w``."""
    ev = _evaluate(u, horizon, model)
    s = ev.t_x * horizon.weights[None, :]
    P = np.einsum("nk,nki,kj->nij", s, ev.D, horizon.xi)
    return P.mean(axis=0)


def l2_norm(v, horizon):
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.sum(v * v) * horizon.cell_area()))


def _interior_values(b, horizon):
    b = np.asarray(b, dtype=float)
    if b.shape == (horizon.lattice.n_nodes, 2):
        return b[horizon.interior]
    if b.shape == (len(horizon.interior), 2):
        return b
    raise InvalidParameterError(f"loading field has unexpected shape {b.shape}")


def residual_loss(samples, horizon, model):
    """Mean relative residual ``||G[u] + b|| / ||b||`` over ``(u, b)`` pairs."""
    if not samples:
        raise InvalidParameterError("no samples")
    total = 0.0
    for s, (u, b) in enumerate(samples):
        b = _interior_values(b, horizon)
        nb = l2_norm(b, horizon)
        if nb == 0:
            raise ZeroDenominatorError(
                f"sample {s} has zero loading; use the displacement/stress loss instead")
        total += l2_norm(apply_operator(u, horizon, model) + b, horizon) / nb
    return total / len(samples)


# -- static solver --------------------------------------------------------------

@dataclass
class PDSolution:
    u: np.ndarray
    residual_history: list
    iterations: int
    method: str

    @property
    def residual(self):
        return self.residual_history[-1]


def _bond_jacobian(u, horizon, model):
    """Analytic dG/du on interior dofs for the linear bond-based model."""
    ev = _evaluate(u, horizon, model)
    c = model.params["stiffness"]
    k = c * (ev.omega_x + ev.omega_q) / horizon.lengths[None, :] * horizon.weights[None, :]
    D = ev.D
    DD = D[..., :, None] * D[..., None, :]
    ratio = (ev.e / ev.ylen)[..., None, None]
    K = k[..., None, None] * (DD + ratio * (np.eye(2) - DD))
    return _assemble(K, ev.nbr, horizon)


def _assemble(K, nbr, horizon):
    n_int = len(horizon.interior)
    pos = np.full(horizon.lattice.n_nodes, -1)
    pos[horizon.interior] = np.arange(n_int)
    rows, cols, vals = [], [], []
    ii, jj = np.meshgrid([0, 1], [0, 1], indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    x_pos = np.repeat(np.arange(n_int), nbr.shape[1])
    q_pos = pos[nbr].ravel()
    Kf = K.reshape(-1, 2, 2)
    for a, b in zip(ii, jj):
        v = Kf[:, a, b]
        # d G_x / d u_x
        rows.append(2 * x_pos + a)
        cols.append(2 * x_pos + b)
        vals.append(-v)
        inner = q_pos >= 0
        rows.append(2 * x_pos[inner] + a)
        cols.append(2 * q_pos[inner] + b)
        vals.append(v[inner])
    J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * n_int, 2 * n_int))
    return J.tocsc()


def _chord_matrix(horizon, model, eps=1e-8):
    """Reference-configuration bond stiffness used by the fixed-point iteration."""
    u0 = np.zeros((horizon.lattice.n_nodes, 2))
    ev = _evaluate(u0, horizon, model)
    L = horizon.lengths[None, :]
    zero = np.zeros_like(ev.e)
    kx = (model.t(ev.omega_x, zero, zero + eps, L) - model.t(ev.omega_x, zero, zero - eps, L)) / (2 * eps)
    kq = (model.t(ev.omega_q, zero, zero + eps, L) - model.t(ev.omega_q, zero, zero - eps, L)) / (2 * eps)
    k = (kx + kq) * horizon.weights[None, :]
    DD = ev.D[..., :, None] * ev.D[..., None, :]
    return _assemble(k[..., None, None] * DD, ev.nbr, horizon)


def solve_displacement(b, bc, horizon, model, tol=1e-8, max_iter=50):
    """Solve ``G[u] + b = 0`` on the interior with ``u = bc`` on the collar.

    The residual is measured relative to ``||b||``, or to the initial
    residual when the loading vanishes.

    Damped Newton with the analytic Jacobian for ``linear_bond`` models,
    otherwise a fixed-point iteration preconditioned by the reference bond
    stiffness.

    Raises
    ------
    NonConvergenceError
        With the residual history, when ``tol`` is not reached.
    """
    b_int = _interior_values(b, horizon)
    u = np.array(bc, dtype=float, copy=True)
    if u.shape != (horizon.lattice.n_nodes, 2):
        raise InvalidParameterError("boundary field must cover every lattice node")
    interior = horizon.interior
    u[interior] = np.where(np.isfinite(u[interior]), u[interior], 0.0)
    scale = l2_norm(b_int, horizon)
    if scale == 0:
        scale = l2_norm(apply_operator(u, horizon, model), horizon) or 1.0

    def residual(v):
        r = apply_operator(v, horizon, model) + b_int
        return r, l2_norm(r, horizon) / scale

    newton = model.kind == "linear_bond"
    if newton:
        limit = max_iter
    else:
        limit = max(max_iter, 500)
        chord = spla.splu(_chord_matrix(horizon, model))
    r, res = residual(u)
    history = [res]
    it = 0
    while res >= tol and it < limit:
        it += 1
        if newton:
            step = spla.spsolve(_bond_jacobian(u, horizon, model), -r.ravel())
        else:
            step = chord.solve(-r.ravel())
        step = step.reshape(-1, 2)
        lam = 1.0
        while True:
            trial = u.copy()
            trial[interior] += lam * step
            try:
                r_new, res_new = residual(trial)
            except DegenerateBondError:
                res_new = np.inf
            if res_new < res or lam < 1e-4:
                break
            lam *= 0.5
        if not np.isfinite(res_new):
            break
        u, r, res = trial, r_new, res_new
        history.append(res)
        logger.debug("iteration %d: relative residual %.3e (step %.3g)", it, res, lam)
    if not res < tol:
        raise NonConvergenceError(
            f"peridynamic solve stalled at relative residual {res:.3e} after {it} iterations",
            history)
    return PDSolution(u, history, it, "newton" if newton else "fixed_point")
