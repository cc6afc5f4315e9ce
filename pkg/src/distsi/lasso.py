"""
Weighted Lasso selection on a single node.

Each node minimizes

    l_k(beta) + ||Lambda beta||_1,   l_k(beta) = sqrt(n) / n_k * sum_i {A(x_i'beta) - y_i x_i'beta}

where ``n`` is the total sample size over all nodes.  The solver is a
proximal Newton method: the smooth part is replaced by its second-order model
and the resulting quadratic Lasso is solved by accelerated proximal gradient
with an active-set Newton polish.  For the Gaussian loss one outer step is
exact.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, KKTViolationError, SolverError, TuningError
from .glm import Dataset, FamilySpec, cumulant, deviance, mean_function, variance_function

KKT_TOL = 1e-8
_TARGET_TOL = 1e-10
MAX_ITER = 50_000
ACTIVE_REL = 1e-10
Z_SLACK = 1e-6
DEFAULT_GRID = tuple(0.5 * k for k in range(1, 11))


@dataclass(frozen=True)
class PenaltySpec:
    """Diagonal of the penalty matrix, one strictly positive weight per predictor."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if lam.size == 0 or not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise InvalidInputError("penalty weights must be finite and strictly positive")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def uniform(cls, value: float, p: int):
        return cls(np.full(p, float(value)))

    @property
    def p(self):
        return self.lam.shape[0]

    def scaled(self, factor: float):
        return PenaltySpec(self.lam * factor)


@dataclass(frozen=True)
class SelectionSummary:
    """Active set, signs, active coefficients and subgradient of one Lasso fit."""

    E: np.ndarray
    S: np.ndarray
    B: np.ndarray
    Z: np.ndarray
    gamma: np.ndarray

    @property
    def p(self):
        return self.gamma.shape[0]

    @property
    def inactive(self):
        mask = np.ones(self.p, dtype=bool)
        mask[self.E] = False
        return np.flatnonzero(mask)


def loss_scale(n_k: int, n_total: int) -> float:
    return np.sqrt(n_total) / n_k


def lasso_gradient(data: Dataset, family: FamilySpec, n_total: int, beta):
    """Gradient of the scaled node loss ``l_k`` at ``beta``."""
    c = loss_scale(data.n, n_total)
    return c * (data.X.T @ (mean_function(family, data.X @ beta) - data.y))


def lasso_objective(data, penalty, family, n_total, beta):
    c = loss_scale(data.n, n_total)
    eta = data.X @ beta
    return c * float(np.sum(cumulant(family, eta) - data.y * eta)) + float(
        np.sum(penalty.lam * np.abs(beta))
    )


def kkt_residual(grad, beta, lam):
    active = beta != 0
    r_act = np.abs(grad[active] + lam[active] * np.sign(beta[active]))
    r_in = np.maximum(0.0, np.abs(grad[~active]) - lam[~active])
    return float(max(r_act.max(initial=0.0), r_in.max(initial=0.0)))


def check_kkt(data: Dataset, penalty: PenaltySpec, family: FamilySpec, n_total: int, beta_hat):
    beta_hat = np.asarray(beta_hat, dtype=float)
    grad = lasso_gradient(data, family, n_total, beta_hat)
    return kkt_residual(grad, beta_hat, penalty.lam)


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _power_lipschitz(H, iters=60):
    v = np.ones(H.shape[0]) / np.sqrt(H.shape[0])
    est = 0.0
    for _ in range(iters):
        w = H @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 1.0
        v = w / nrm
        if abs(nrm - est) <= 1e-6 * nrm:
            est = nrm
            break
        est = nrm
    # power iteration approaches from below; pad so 1/L is a safe step
    return 1.05 * est + 1e-12


def _polish(H, q, lam, x):
    """Solve the quadratic stationarity equations on the support and signs of ``x``."""
    E = np.flatnonzero(x)
    if E.size == 0:
        return np.zeros_like(x)
    s = np.sign(x[E])
    try:
        bE = np.linalg.solve(H[np.ix_(E, E)], -q[E] - lam[E] * s)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(bE) != s):
        return None
    out = np.zeros_like(x)
    out[E] = bE
    return out


def _quadratic_lasso(H, q, lam, x0, tol, budget):
    """Minimize 0.5 x'Hx + q'x + sum lam|x| by restarted FISTA plus polishing.

    Returns ``(x, iterations_used)``.
    """
    L = _power_lipschitz(H)
    x = x0.copy()
    z = x.copy()
    t = 1.0
    used = 0
    for used in range(1, budget + 1):
        grad = H @ z + q
        x_new = _soft(z - grad / L, lam / L)
        if np.dot(z - x_new, x_new - x) > 0:
            # adaptive restart
            t = 1.0
            z = x_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
        if used % 20 == 0 or used == 1:
            if kkt_residual(H @ x + q, x, lam) < tol:
                return x, used
            xp = _polish(H, q, lam, x)
            if xp is not None and kkt_residual(H @ xp + q, xp, lam) < tol:
                return xp, used
    return x, used


def solve_weighted_lasso(
    data: Dataset,
    penalty: PenaltySpec,
    family: FamilySpec,
    n_total: int,
    *,
    beta0: Optional[np.ndarray] = None,
    max_iter: int = MAX_ITER,
):
    """Minimize the scaled node loss plus the weighted l1 penalty.

    Returns the coefficient vector.  The returned point always satisfies
    ``check_kkt(...) < 1e-8``; otherwise SolverError is raised carrying the
    best residual reached.
    """
    if penalty.p != data.p:
        raise InvalidInputError(f"penalty has {penalty.p} weights for {data.p} predictors")
    if n_total < data.n:
        raise InvalidInputError("n_total must be at least the node sample size")
    X, y, lam = data.X, data.y, penalty.lam
    c = loss_scale(data.n, n_total)
    beta = np.zeros(data.p) if beta0 is None else np.array(beta0, dtype=float)

    if family.is_gaussian:
        H = c * (X.T @ X)
        q = -c * (X.T @ y)
        beta, _ = _quadratic_lasso(H, q, lam, beta, _TARGET_TOL, max_iter)
        res = kkt_residual(H @ beta + q, beta, lam)
        if res >= KKT_TOL:
            raise SolverError(f"lasso did not converge (KKT residual {res:.3g})", residual=res)
        return beta

    def objective(b):
        eta = X @ b
        return c * float(np.sum(cumulant(family, eta) - y * eta)) + float(np.sum(lam * np.abs(b)))

    spent = 0
    F = objective(beta)
    res = np.inf
    for _ in range(200):
        eta = X @ beta
        g = c * (X.T @ (mean_function(family, eta) - y))
        res = kkt_residual(g, beta, lam)
        if res < _TARGET_TOL or (res < KKT_TOL and spent >= max_iter):
            return beta
        w = variance_function(family, eta)
        H = c * ((X.T * w) @ X)
        q = g - H @ beta
        inner_tol = max(_TARGET_TOL * 0.1, min(1e-3, 1e-2 * res))
        cand, used = _quadratic_lasso(H, q, lam, beta, inner_tol, max(1, max_iter - spent))
        spent += used
        d = cand - beta
        delta = g @ d + np.sum(lam * (np.abs(cand) - np.abs(beta)))
        step = 1.0
        accepted = False
        for _ in range(50):
            trial = beta + step * d
            F_trial = objective(trial)
            if F_trial <= F + 0.25 * step * delta or np.max(np.abs(step * d)) < 1e-15:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if step < 1.0:
            # soft-threshold the damped point so exact zeros survive
            trial = np.where(np.abs(trial) < 1e-14, 0.0, trial)
            F_trial = objective(trial)
        beta, F = trial, F_trial
        if not np.all(np.isfinite(beta)):
            break
        if spent >= max_iter:
            break
    eta = X @ beta
    g = c * (X.T @ (mean_function(family, eta) - y))
    res = kkt_residual(g, beta, lam)
    if res < KKT_TOL:
        return beta
    raise SolverError(f"lasso did not converge (KKT residual {res:.3g})", residual=res)


def extract_selection(beta_hat, grad, penalty: PenaltySpec) -> SelectionSummary:
    beta_hat = np.asarray(beta_hat, dtype=float)
    grad = np.asarray(grad, dtype=float)
    lam = penalty.lam
    if beta_hat.shape != grad.shape or beta_hat.shape[0] != lam.shape[0]:
        raise InvalidInputError("extract_selection: shape mismatch")
    thresh = ACTIVE_REL * max(1.0, float(np.max(np.abs(beta_hat), initial=0.0)))
    active = np.abs(beta_hat) > thresh
    E = np.flatnonzero(active)
    S = np.sign(beta_hat[E])
    B = beta_hat[E].copy()
    Z = -grad[~active] / lam[~active]
    worst = float(np.max(np.abs(Z), initial=0.0))
    if worst > 1.0 + Z_SLACK:
        raise KKTViolationError(f"inactive subgradient has magnitude {worst:.9g} > 1")
    Z = np.clip(Z, -1.0, 1.0)
    gamma = np.empty_like(beta_hat)
    gamma[E] = lam[E] * S
    gamma[~active] = lam[~active] * Z
    for arr in (E, S, B, Z, gamma):
        arr.setflags(write=False)
    return SelectionSummary(E=E, S=S, B=B, Z=Z, gamma=gamma)


def select(data: Dataset, penalty: PenaltySpec, family: FamilySpec, n_total: int):
    """Solve the node Lasso and read off its selection summary."""
    beta = solve_weighted_lasso(data, penalty, family, n_total)
    grad = lasso_gradient(data, family, n_total, beta)
    return beta, extract_selection(beta, grad, penalty)


def lambda_candidates(y, p: int, grid: Sequence[float] = DEFAULT_GRID):
    sd = float(np.std(np.asarray(y, dtype=float), ddof=1)) if len(y) > 1 else 1.0
    if not sd > 0:
        sd = 1.0
    base = np.sqrt(2.0 * np.log(p)) * sd if p > 1 else sd
    return [float(t) * base for t in grid]


def tune_lambda(
    train: Dataset,
    validation: Dataset,
    family: FamilySpec,
    grid: Sequence[float] = DEFAULT_GRID,
    n_total: Optional[int] = None,
) -> PenaltySpec:
    """Pick the candidate penalty with the smallest validation deviance.

    Candidates are ``t * sqrt(2 log p) * sd(y_train)`` for ``t`` in ``grid``.
    ``n_total`` sets the loss scaling used during fitting so the chosen level
    transfers to nodes solving with the same total sample size.
    """
    grid = list(grid)
    if not grid:
        raise InvalidInputError("tuning grid is empty")
    if train.p != validation.p:
        raise InvalidInputError("train and validation disagree on p")
    n_total = train.n if n_total is None else n_total
    best = None
    for t, lam in sorted(zip(grid, lambda_candidates(train.y, train.p, grid))):
        pen = PenaltySpec.uniform(lam, train.p)
        try:
            beta = solve_weighted_lasso(train, pen, family, n_total)
        except SolverError:
            continue
        dev = deviance(validation.X, validation.y, beta, family)
        if best is None or dev < best[0]:
            best = (dev, pen)
    if best is None:
        raise TuningError("every candidate penalty failed to fit")
    return best[1]
