"""Physics-guided smoothing: least-squares RK fit plus a negative-strain penalty.

The warm start is the analytic least-squares fit of the RK coefficients to
the measured displacements. If any penalized normal strain of that fit is
negative, the coefficients are refined with Adam on

    loss_u + beta * loss_E

where ``loss_E`` sums ``(relu(-E11) + relu(-E22))**2`` over the measurement
points and ``beta`` is rescaled by the warm-start losses so that the user
penalty ``beta_tilde`` is unit-free.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, asdict
import logging

import numpy as np

from .errors import InvalidParameterError, RankDeficiencyError
from .field_recon import check_coefficients

logger = logging.getLogger(__name__)

RANK_LIMIT = 1e12


@dataclass(frozen=True)
class PGSConfig:
    """Optimizer settings. Defaults follow the published PGS setup."""

    beta_tilde: float = 100.0
    max_epochs: int = 50_000
    tol_u: float = 3.0
    tol_E: float = 1e-5
    learning_rate: float = 1e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 1000
    constraint_mask: tuple = (True, True)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    strain_eps: float = 0.0
    # "loss_ratio": beta = beta_tilde * beta_u / beta_E
    # "inverse_ratio": beta = beta_tilde * beta_E / beta_u
    beta_form: str = "loss_ratio"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise InvalidParameterError("max_epochs must be >= 1")
        if not (self.tol_u > 0 and self.tol_E > 0):
            raise InvalidParameterError("tolerances must be positive")
        if self.beta_tilde < 0:
            raise InvalidParameterError("beta_tilde must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise InvalidParameterError("lr_decay must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise InvalidParameterError("lr_decay_every must be >= 1")
        if self.beta_form not in ("loss_ratio", "inverse_ratio"):
            raise InvalidParameterError(f"unknown beta_form {self.beta_form!r}")
        object.__setattr__(self, "constraint_mask", tuple(bool(m) for m in self.constraint_mask))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string/number values, e.g. an INI section; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise InvalidParameterError(f"unknown PGS config key {key!r}")
            default = known[key].default
            kwargs[key] = _coerce(value, default)
        return cls(**kwargs)

    def to_dict(self):
        d = asdict(self)
        d["constraint_mask"] = list(self.constraint_mask)
        d["adam_betas"] = list(self.adam_betas)
        return d


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.replace(",", " ").split()]
        return tuple(_coerce(p, default[0]) for p in parts)
    if isinstance(default, int):
        return int(float(value))
    if isinstance(default, float):
        return float(value)
    return value


def parse_mask(text):
    """``"E11"``, ``"E22"``, ``"both"`` or ``"none"`` -> pair of booleans."""
    text = text.strip().lower()
    table = {"e11": (True, False), "e22": (False, True), "both": (True, True),
             "none": (False, False)}
    if text not in table:
        raise InvalidParameterError(f"unknown constraint mask {text!r}")
    return table[text]


@dataclass(frozen=True)
class DisplacementSample:
    u_exp: np.ndarray
    protocol_id: str = ""
    constraint_mask: tuple = (True, True)

    def __post_init__(self):
        u = np.ascontiguousarray(self.u_exp, dtype=float)
        if u.ndim != 2 or u.shape[1] != 2:
            raise InvalidParameterError("u_exp must have shape (N, 2)")
        if not np.all(np.isfinite(u)):
            raise InvalidParameterError("u_exp contains non-finite values")
        object.__setattr__(self, "u_exp", u)
        object.__setattr__(self, "constraint_mask", tuple(bool(m) for m in self.constraint_mask))


@dataclass
class PGSReport:
    loss_u_initial: float
    loss_E_initial: float
    beta_effective: float
    epochs_run: int
    loss_u_final: float
    loss_E_final: float
    converged: bool
    skipped: bool
    break_epoch: int = None
    returned: str = "warm_start"
    loss_u_break: float = None
    loss_E_break: float = None

    def to_dict(self):
        return asdict(self)


def _mask_of(sample_or_mask):
    if isinstance(sample_or_mask, DisplacementSample):
        return sample_or_mask.constraint_mask
    return tuple(bool(m) for m in sample_or_mask)


def _u_exp(sample):
    if isinstance(sample, DisplacementSample):
        return sample.u_exp
    return np.asarray(sample, dtype=float)


def loss_u(coeffs, basis, sample):
    """Sum of squared displacement misfits over the measurement points."""
    r = basis.shape_matrix @ coeffs - _u_exp(sample)
    return float(np.sum(r * r))


def _normal_strains(coeffs, basis):
    G1, G2 = basis.grad_matrices
    g1 = G1 @ coeffs  # columns: du1/dx1, du2/dx1
    g2 = G2 @ coeffs  # columns: du1/dx2, du2/dx2
    E11 = g1[:, 0] + 0.5 * (g1[:, 0] ** 2 + g1[:, 1] ** 2)
    E22 = g2[:, 1] + 0.5 * (g2[:, 0] ** 2 + g2[:, 1] ** 2)
    return g1, g2, E11, E22


def _penalty_terms(E11, E22, mask):
    n11 = np.maximum(-E11, 0.0) if mask[0] else np.zeros_like(E11)
    n22 = np.maximum(-E22, 0.0) if mask[1] else np.zeros_like(E22)
    return n11 + n22


def loss_E(coeffs, basis, sample):
    """Negative normal strain penalty, restricted to the masked components.

    ``sample`` may be a :class:`DisplacementSample` or a mask pair.
    """
    _, _, E11, E22 = _normal_strains(coeffs, basis)
    r = _penalty_terms(E11, E22, _mask_of(sample))
    return float(np.sum(r * r))


def objective(coeffs, basis, u_exp, mask, beta):
    """``(loss_u, loss_E, gradient of loss_u + beta*loss_E)``; fully analytic."""
    Phi = basis.shape_matrix
    G1, G2 = basis.grad_matrices
    res = Phi @ coeffs - u_exp
    lu = float(np.sum(res * res))
    grad = 2.0 * (Phi.T @ res)
    g1, g2, E11, E22 = _normal_strains(coeffs, basis)
    r = _penalty_terms(E11, E22, mask)
    le = float(np.sum(r * r))
    if beta != 0.0 and le > 0.0:
        # relu'(0) taken as 0: strictly negative strains only
        w11 = -2.0 * r * (E11 < 0) if mask[0] else np.zeros_like(r)
        w22 = -2.0 * r * (E22 < 0) if mask[1] else np.zeros_like(r)
        # dE11/dg1 = (1 + du1/dx1, du2/dx1); dE22/dg2 = (du1/dx2, 1 + du2/dx2)
        dg1 = np.column_stack([w11 * (1.0 + g1[:, 0]), w11 * g1[:, 1]])
        dg2 = np.column_stack([w22 * g2[:, 0], w22 * (1.0 + g2[:, 1])])
        grad += beta * (G1.T @ dg1 + G2.T @ dg2)
    return lu, le, grad


def analytic_fit(basis, sample):
    """Least-squares RK coefficients, solved per component by SVD-based lstsq.

    Raises
    ------
    RankDeficiencyError
        If the shape matrix condition number exceeds 1e12.
    """
    U = _u_exp(sample)
    Phi = basis.shape_matrix
    if U.shape != (Phi.shape[0], 2):
        raise InvalidParameterError(
            f"sample has {U.shape[0]} points, basis has {Phi.shape[0]}")
    coeffs, _, rank, sv = np.linalg.lstsq(Phi, U, rcond=None)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    if rank < Phi.shape[1] or not cond < RANK_LIMIT:
        raise RankDeficiencyError(float(sv[-1]), float(cond))
    return coeffs


def rescale_beta(beta_tilde, beta_u, beta_E, form="loss_ratio"):
    """Effective penalty from the warm-start losses.

    Returns ``None`` when ``beta_E == 0``: nothing to penalize, so the caller
    should skip the optimization.
    """
    if beta_tilde == 0:
        return 0.0
    if beta_E == 0:
        return None
    if form == "loss_ratio":
        return beta_tilde * beta_u / beta_E
    if form == "inverse_ratio":
        return beta_tilde * beta_E / beta_u
    raise InvalidParameterError(f"unknown beta_form {form!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def run_pgs(sample, basis, config=None):
    """Smooth one displacement snapshot.

    Returns
    -------
    coeffs : ndarray, shape (n_centers, 2)
    report : PGSReport
    """
    config = config or PGSConfig()
    mask = sample.constraint_mask
    u_exp = sample.u_exp
    coeffs0 = analytic_fit(basis, sample)
    beta_u = loss_u(coeffs0, basis, sample)
    beta_E = loss_E(coeffs0, basis, mask)

    _, _, E11, E22 = _normal_strains(coeffs0, basis)
    masked = [E for E, m in zip((E11, E22), mask) if m]
    negative = bool(masked) and min(float(E.min()) for E in masked) < -config.strain_eps

    beta = rescale_beta(config.beta_tilde, beta_u, beta_E, config.beta_form)
    if not negative or not beta or beta_u == 0:
        return coeffs0, PGSReport(beta_u, beta_E, beta or 0.0, 0, beta_u, beta_E,
                                  converged=True, skipped=True)

    lim_u = config.tol_u * beta_u
    lim_E = config.tol_E * beta_E
    coeffs = coeffs0.copy()
    state = AdamState.zeros_like(coeffs)
    best = None
    best_lu = np.inf
    converged = False
    break_epoch = None
    epochs = 0
    lu = le = None
    for epoch in range(config.max_epochs):
        lu, le, grad = objective(coeffs, basis, u_exp, mask, beta)
        if le <= lim_E:
            if lu <= lim_u:
                converged = True
                break_epoch = epoch
                break
            if lu < best_lu:
                best, best_lu = (coeffs.copy(), lu, le), lu
        lr = config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)
        coeffs, state = adam_step(coeffs, grad, state, lr, config.adam_betas, config.adam_eps)
        epochs = epoch + 1
    else:
        lu = loss_u(coeffs, basis, sample)
        le = loss_E(coeffs, basis, mask)

    report = PGSReport(beta_u, beta_E, beta, epochs, lu, le, converged, False,
                       break_epoch=break_epoch)
    if converged:
        report.returned = "break"
        report.loss_u_break, report.loss_E_break = lu, le
        return coeffs, report
    if best is not None:
        report.returned = "best_feasible"
        coeffs, report.loss_u_final, report.loss_E_final = best
        return coeffs, report
    report.returned = "final"
    logger.info("PGS did not converge in %d epochs (loss_E %.3e, loss_u %.3e)",
                epochs, le, lu)
    return coeffs, report


def _run_one(args):
    sample, basis, config = args
    return run_pgs(sample, basis, config)


def run_batch(samples, basis, config=None, jobs=1):
    """Run :func:`run_pgs` over independent samples, in order."""
    config = config or PGSConfig()
    tasks = [(s, basis, config) for s in samples]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks))
