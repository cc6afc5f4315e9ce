"""
Exponential-family GLM primitives with canonical link.

Only two families are supported: Gaussian (identity link) and Bernoulli
(logit link).  Losses follow the unit-dispersion convention

    sum_i A(x_i' beta) - y_i x_i' beta

and observed information matrices are divided by the family dispersion.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    InvalidInputError,
    SeparationError,
    SingularDesignError,
    SingularInformationError,
)

_ALIASES = {
    "gaussian": "gaussian",
    "normal": "gaussian",
    "bernoulli-logit": "bernoulli-logit",
    "logit": "bernoulli-logit",
    "logistic": "bernoulli-logit",
    "binomial": "bernoulli-logit",
}

RANK_TOL = 1e-10
GRAD_TOL = 1e-10
MAX_NEWTON = 100
# fitted probabilities within exp(-30) of 0 or 1 mean the coefficients are running off
ETA_LIMIT = 30.0


@dataclass(frozen=True)
class FamilySpec:
    kind: str = "gaussian"
    dispersion: float = 1.0
    dispersion_mode: str = "known"

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise InvalidInputError(f"unknown family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.dispersion_mode not in ("known", "estimate"):
            raise InvalidInputError(f"unknown dispersion_mode {self.dispersion_mode!r}")
        if kind == "bernoulli-logit":
            if self.dispersion != 1.0 or self.dispersion_mode != "known":
                raise InvalidInputError("bernoulli-logit has fixed dispersion 1")
        if not (np.isfinite(self.dispersion) and self.dispersion > 0):
            raise InvalidInputError("dispersion must be positive")

    @property
    def is_gaussian(self):
        return self.kind == "gaussian"

    def with_dispersion(self, dispersion):
        return FamilySpec(self.kind, float(dispersion), "known")


GAUSSIAN = FamilySpec("gaussian")
LOGISTIC = FamilySpec("bernoulli-logit")


def cumulant(family: FamilySpec, eta):
    eta = np.asarray(eta, dtype=float)
    if family.is_gaussian:
        return 0.5 * eta ** 2
    return np.logaddexp(0.0, eta)


def mean_function(family: FamilySpec, eta):
    eta = np.asarray(eta, dtype=float)
    if family.is_gaussian:
        return eta.copy()
    return expit(eta)


def variance_function(family: FamilySpec, eta):
    eta = np.asarray(eta, dtype=float)
    if family.is_gaussian:
        return np.ones_like(eta)
    # mu * (1 - mu) written with two expits keeps the tails exact
    return expit(eta) * expit(-eta)


def family_eval(family: FamilySpec, eta: float):
    """Return ``(A(eta), A'(eta), A''(eta))`` for a scalar natural parameter."""
    eta = float(eta)
    if not np.isfinite(eta):
        raise InvalidInputError("eta must be finite")
    return (
        float(cumulant(family, eta)),
        float(mean_function(family, eta)),
        float(variance_function(family, eta)),
    )


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    node_id: int = 0

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise InvalidInputError("X must be a matrix")
        n, p = X.shape
        if n < 1 or p < 1:
            raise InvalidInputError("dataset needs n >= 1 and p >= 1")
        if y.shape[0] != n:
            raise InvalidInputError(f"X has {n} rows but y has {y.shape[0]} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidInputError("dataset contains non-finite values")
        if int(self.node_id) < 0:
            raise InvalidInputError("node_id must be >= 0")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "node_id", int(self.node_id))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def check_family(self, family: FamilySpec):
        if not family.is_gaussian and not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidInputError(f"node {self.node_id}: logistic responses must be 0/1")
        return self


@dataclass(frozen=True)
class GlmFit:
    beta: np.ndarray
    obs_fi: np.ndarray
    converged: bool = True
    iterations: int = 0
    n: int = field(default=0, compare=False)


def _check_rank(X):
    n, d = X.shape
    if d == 0:
        return
    if d > n:
        raise SingularDesignError(f"{d} predictors but only {n} observations")
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] < RANK_TOL * sv[0]:
        raise SingularDesignError(
            f"design is rank deficient (singular value ratio {sv[-1] / sv[0]:.3g})"
        )


def glm_loss(X, y, beta, family):
    eta = X @ beta
    return float(np.sum(cumulant(family, eta) - y * eta))


def glm_gradient(X, y, beta, family):
    """Gradient of the per-observation average loss."""
    eta = X @ beta
    return X.T @ (mean_function(family, eta) - y) / X.shape[0]


def obs_fisher(X_E, beta, family: FamilySpec):
    """(1/n) X' diag(A''(X beta)) X, divided by the dispersion."""
    X_E = np.asarray(X_E, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if X_E.ndim != 2 or X_E.shape[1] != beta.shape[0]:
        raise InvalidInputError("obs_fisher: shape mismatch between X and beta")
    w = variance_function(family, X_E @ beta)
    info = (X_E.T * w) @ X_E / X_E.shape[0]
    info = 0.5 * (info + info.T)
    return info / family.dispersion


def fit_glm(X_E, y, family: FamilySpec, max_iter: int = MAX_NEWTON, tol: float = GRAD_TOL,
            eta_limit: Optional[float] = ETA_LIMIT):
    """Maximum likelihood in the GLM restricted to the columns of ``X_E``.

    Damped Newton with step halving.  Gaussian converges in one step.
    Raises SingularDesignError on rank deficiency and SeparationError when the
    logistic iteration does not converge (the usual symptom of separation)
    or the linear predictor leaves ``[-eta_limit, eta_limit]``.  Pass
    ``eta_limit=None`` for fractional responses, where separation cannot occur.
    """
    X_E = np.asarray(X_E, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X_E.shape
    _check_rank(X_E)
    beta = np.zeros(d)
    if d == 0:
        return GlmFit(beta, np.zeros((0, 0)), True, 0, n)

    if family.is_gaussian:
        beta = np.linalg.lstsq(X_E, y, rcond=None)[0]
        # one refinement step against round-off
        r = y - X_E @ beta
        beta = beta + np.linalg.lstsq(X_E, r, rcond=None)[0]
        return GlmFit(beta, obs_fisher(X_E, beta, family), True, 1, n)

    loss = glm_loss(X_E, y, beta, family)
    for it in range(1, max_iter + 1):
        eta = X_E @ beta
        grad = X_E.T @ (mean_function(family, eta) - y) / n
        if eta_limit is not None and np.max(np.abs(eta)) > eta_limit:
            raise SeparationError("linear predictor diverging; data likely separated")
        if np.max(np.abs(grad)) < tol:
            return GlmFit(beta, obs_fisher(X_E, beta, family), True, it - 1, n)
        w = variance_function(family, eta)
        H = (X_E.T * w) @ X_E / n
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("Hessian became singular; data likely separated") from exc
        t = 1.0
        for _ in range(60):
            cand = beta - t * step
            new_loss = glm_loss(X_E, y, cand, family)
            if new_loss <= loss + 1e-12 * (1.0 + abs(loss)):
                break
            t *= 0.5
        beta, loss = cand, new_loss
        if not np.all(np.isfinite(beta)):
            raise SeparationError("logistic fit diverged")
    raise SeparationError(
        f"logistic fit did not converge in {max_iter} iterations (separation?)"
    )


def aggregate_mle(fits: Sequence[GlmFit], rho: Sequence[float]):
    """Information-weighted merge of local MLEs.

    Returns ``(beta_E, I_hat)`` with ``I_hat = sum rho_k I_k`` and
    ``beta_E = I_hat^{-1} sum rho_k I_k beta_k``.
    """
    rho = np.asarray(rho, dtype=float)
    if len(fits) != rho.shape[0] or len(fits) == 0:
        raise InvalidInputError("need one sample fraction per fit")
    if abs(rho.sum() - 1.0) > 1e-12:
        raise InvalidInputError(f"sample fractions sum to {rho.sum()!r}, not 1")
    d = fits[0].beta.shape[0]
    if any(f.beta.shape[0] != d for f in fits):
        raise InvalidInputError("fits disagree on model dimension")
    info = sum(r * f.obs_fi for r, f in zip(rho, fits))
    rhs = sum(r * f.obs_fi @ f.beta for r, f in zip(rho, fits))
    info = 0.5 * (info + info.T)
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("aggregated information is not positive definite") from exc
    beta = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return beta, info


def residual_score(X, y, beta_E, E, family: FamilySpec = GAUSSIAN):
    """(1/n) X_{-E}' (A'(X_E beta_E) - y); empty when E covers every column."""
    X = np.asarray(X, dtype=float)
    E = np.asarray(E, dtype=int)
    mask = np.ones(X.shape[1], dtype=bool)
    mask[E] = False
    eta = X[:, E] @ np.asarray(beta_E, dtype=float)
    resid = mean_function(family, eta) - np.asarray(y, dtype=float)
    return X[:, mask].T @ resid / X.shape[0]


def deviance(X, y, beta, family: FamilySpec):
    eta = np.asarray(X) @ beta
    if family.is_gaussian:
        return float(np.sum((y - eta) ** 2))
    # saturated log-likelihood is zero for binary responses
    return float(2.0 * np.sum(cumulant(family, eta) - y * eta))


def estimate_dispersion(rss: float, n: int, d: int) -> float:
    if n <= d:
        raise InvalidInputError("cannot estimate dispersion with n <= d")
    return rss / (n - d)


def design_columns(X, E: Optional[Sequence[int]]):
    return np.asarray(X)[:, np.asarray(E, dtype=int)]
