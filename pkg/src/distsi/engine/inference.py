"""Selective MLE, selective information and the resulting intervals and p-values.

All quantities live on the ``theta = sqrt(n) beta`` scale internally; the
reported estimates and standard errors are converted back to ``beta``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from ..errors import DegenerateGeometryError, InsufficientHoldoutError, InvalidInputError
from ..glm import FamilySpec, fit_glm, obs_fisher
from .barrier import barrier, minimize_barrier_quadratic
from .bundle import spd_inverse

METHODS = ("dist-si", "splitting", "naive")


@dataclass(frozen=True)
class InferenceReport:
    """Per-coefficient estimates with intervals; arrays are aligned with ``coef``."""

    coef: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    pvalue: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    method: str
    alpha: float = 0.1

    def rows(self):
        for i, j in enumerate(self.coef):
            yield (
                int(j), float(self.estimate[i]), float(self.stderr[i]), float(self.pvalue[i]),
                float(self.ci_lo[i]), float(self.ci_hi[i]), self.method,
            )

    def __len__(self):
        return len(self.coef)


def _solve(M, b, what):
    try:
        return np.linalg.solve(M, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError(f"{what} is singular") from exc


def selective_mle(bundle, beta_E, opt, n, I_hat):
    """Selection-adjusted MLE on the ``beta`` scale."""
    rn = np.sqrt(n)
    theta_hat = rn * np.asarray(beta_E, dtype=float)
    resid = bundle.mean(theta_hat) - opt.W_star
    correction = _solve(I_hat, bundle.Psi.T @ (bundle.Gamma_inv @ resid), "I_hat")
    theta = _solve(bundle.Pi, theta_hat - bundle.kappa, "Pi") + correction
    return theta / rn


def selective_fisher(bundle, opt, I_hat):
    """Observed selective information for ``theta = sqrt(n) beta``."""
    Gi = bundle.Gamma_inv
    GiPsi = Gi @ bundle.Psi
    inner = Gi + opt.barrier_hess
    M = bundle.Theta_inv + bundle.Psi.T @ GiPsi - GiPsi.T @ _solve(inner, GiPsi, "Gamma^{-1} + barrier Hessian")
    _, Minv = spd_inverse(M, "selective information core")
    out = I_hat @ Minv @ I_hat
    return 0.5 * (out + out.T)


def _normal_quantile(alpha):
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError("alpha must lie in (0, 1)")
    return float(ndtri(1.0 - alpha / 2.0))


def wald_report(coef, estimate, cov, alpha, method):
    """Two-sided Wald summary from an estimate on the ``beta`` scale and its covariance."""
    estimate = np.asarray(estimate, dtype=float)
    se = np.sqrt(np.diag(cov))
    if np.any(~np.isfinite(se)) or np.any(se <= 0):
        raise DegenerateGeometryError("nonpositive variance in Wald summary")
    z = estimate / se
    pval = np.minimum(1.0, 2.0 * ndtr(-np.abs(z)))
    half = _normal_quantile(alpha) * se
    arrays = [np.asarray(coef, dtype=int), estimate, se, pval, estimate - half, estimate + half]
    for a in arrays:
        a.setflags(write=False)
    return InferenceReport(*arrays, method=method, alpha=alpha)


def infer(beta_sel, fisher_sel, n, alpha, coef=None, method="dist-si"):
    """P-values and intervals from the selective MLE and selective information."""
    beta_sel = np.asarray(beta_sel, dtype=float)
    _, cov_theta = spd_inverse(np.asarray(fisher_sel, dtype=float), "selective information")
    coef = np.arange(beta_sel.size) if coef is None else coef
    return wald_report(coef, beta_sel, cov_theta / n, alpha, method)


def baseline_infer(kind, X_E, y, family: FamilySpec, alpha, coef=None):
    """Unadjusted Wald inference for the selected model.

    ``naive`` passes the pooled data of every node, ``splitting`` only the
    holdout.  For a Gaussian family in estimate mode the residual variance of
    this fit is used; otherwise the family dispersion is taken as known.
    """
    if kind not in ("naive", "splitting"):
        raise InvalidInputError(f"unknown baseline {kind!r}")
    X_E = np.asarray(X_E, dtype=float)
    n, d = X_E.shape
    if kind == "splitting" and n <= d:
        raise InsufficientHoldoutError(f"holdout has {n} samples for {d} coefficients")
    fit = fit_glm(X_E, y, family)
    disp = family.dispersion
    if family.is_gaussian and family.dispersion_mode == "estimate":
        if n <= d:
            raise InsufficientHoldoutError("not enough samples to estimate the dispersion")
        disp = float(np.sum((y - X_E @ fit.beta) ** 2)) / (n - d)
    info = obs_fisher(X_E, fit.beta, family) * family.dispersion / disp
    _, cov = spd_inverse(n * info, "baseline information")
    coef = np.arange(d) if coef is None else coef
    return wald_report(coef, fit.beta, cov, alpha, kind)


def approx_selective_loglik(bundle, beta_E, n, beta, tol=1e-11):
    """Approximate selective log-likelihood at ``beta`` (``theta = sqrt(n) beta`` units).

    Evaluates

        -0.5 (t - m)'Theta^{-1}(t - m)
        + inf_{u, W} {0.5 (u - m)'Theta^{-1}(u - m) + 0.5 |W - Psi u - tau|^2_{Gamma^{-1}} + Barr(W)}

    with ``t = sqrt(n) beta_E`` and ``m = Pi theta + kappa``.  The inner
    problem is solved jointly in ``(u, W)`` by damped Newton.
    """
    rn = np.sqrt(n)
    t_obs = rn * np.asarray(beta_E, dtype=float)
    m = bundle.Pi @ (rn * np.asarray(beta, dtype=float)) + bundle.kappa
    Ti, Gi, Psi, tau, S = bundle.Theta_inv, bundle.Gamma_inv, bundle.Psi, bundle.tau, bundle.S
    d = m.size

    # reduce to W alone: for fixed W the optimal u is explicit
    A = Ti + Psi.T @ Gi @ Psi
    _, A_inv = spd_inverse(A, "joint Hessian block")
    # value(W) = 0.5 W'QW - W'Gi(Psi u* + tau) ... write as a quadratic in W
    # u*(W) = A^{-1}(Ti m + Psi'Gi(W - tau))
    P = A_inv @ Psi.T @ Gi
    Q = Gi - Gi @ Psi @ P
    h = A_inv @ (Ti @ m - Psi.T @ Gi @ tau)
    # W-quadratic: 0.5 (W - c)'Q(W - c) + const with c solving Q c = Gi(Psi h + tau)
    c = np.linalg.solve(Q, Gi @ (Psi @ h + tau))
    W0 = S * np.maximum(np.abs(c), 1.0)
    W, _, _, _ = minimize_barrier_quadratic(Q, c, S, W0, tol=tol, max_iter=500)
    u = h + P @ W
    r = W - Psi @ u - tau
    inner = 0.5 * (u - m) @ Ti @ (u - m) + 0.5 * r @ Gi @ r + barrier(W, S)[0]
    return float(-0.5 * (t_obs - m) @ Ti @ (t_obs - m) + inner)
