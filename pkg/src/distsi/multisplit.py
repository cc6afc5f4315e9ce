"""
Repeated subsample selection with selective p-values and quantile aggregation.

Each replicate draws K subsets of size n1 (each without replacement from the
full sample, independently across subsets), selects on every subset, and
computes selective p-values on the full sample for the union of the selected
sets.  Predictors outside the union receive p-value one.  Replicate p-values
are combined per predictor with the adaptive quantile rule

    Q_j(g) = min(1, q_g(p_j / g)),
    P_j    = min(1, (1 - log g_min) * inf_{g in (g_min, 1)} Q_j(g)),

with ``q_g`` the ceil(g B)-th order statistic.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import (
    LocalSummary,
    assemble_matrices_wr,
    baseline_infer,
    infer,
    selective_fisher,
    selective_mle,
    solve_selection_opt,
)
from .errors import DistSIError, InvalidInputError
from .glm import Dataset, FamilySpec, estimate_dispersion, fit_glm
from .lasso import PenaltySpec, lambda_candidates, select

PURPOSE_SUBSETS = 11
PURPOSE_SPLIT = 12


@dataclass(frozen=True)
class MultisplitConfig:
    B: int = 5
    K: int = 1
    n1: Optional[int] = None
    gamma_min: float = 0.05
    alpha: float = 0.1
    seed: int = 0
    lambda_scale: float = 1.0

    def __post_init__(self):
        if self.B < 1:
            raise InvalidInputError("B must be at least 1")
        if self.K < 1:
            raise InvalidInputError("K must be at least 1")
        if not 0.0 < self.gamma_min < 1.0:
            raise InvalidInputError("gamma_min must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("alpha must lie in (0, 1)")
        if not self.lambda_scale > 0:
            raise InvalidInputError("lambda_scale must be positive")

    def subset_size(self, n):
        n1 = n // 2 if self.n1 is None else int(self.n1)
        if not 0 < n1 < n:
            raise InvalidInputError(f"subset size {n1} must lie strictly between 0 and n={n}")
        return n1


def default_penalty(data: Dataset, config: MultisplitConfig) -> PenaltySpec:
    """Uniform penalty ``lambda_scale * sqrt(2 log p) * sd(y)``."""
    lam = lambda_candidates(data.y, data.p, [config.lambda_scale])[0]
    return PenaltySpec.uniform(lam, data.p)


def _rng(seed, replicate, purpose):
    return np.random.default_rng([int(seed), int(replicate), int(purpose)])


def run_replicate(data: Dataset, config: MultisplitConfig, family: FamilySpec, penalty: PenaltySpec,
                  replicate: int = 0):
    """Selective p-values for one replicate; length p, ones outside the selected model."""
    n, p = data.n, data.p
    n1 = config.subset_size(n)
    rng = _rng(config.seed, replicate, PURPOSE_SUBSETS)
    pvals = np.ones(p)
    sels = []
    for _ in range(config.K):
        idx = np.sort(rng.choice(n, size=n1, replace=False))
        sub = Dataset(data.X[idx], data.y[idx], 0)
        sels.append(select(sub, penalty, family, n)[1])
    E = np.unique(np.concatenate([s.E for s in sels]))
    if E.size == 0 or E.size >= n:
        return pvals
    try:
        fam = family
        if family.is_gaussian and family.dispersion_mode == "estimate":
            beta_ls = fit_glm(data.X[:, E], data.y, family.with_dispersion(1.0)).beta
            rss = float(np.sum((data.y - data.X[:, E] @ beta_ls) ** 2))
            fam = family.with_dispersion(estimate_dispersion(rss, n, E.size))
        fit = fit_glm(data.X[:, E], data.y, fam)
        locals_ = [
            LocalSummary(k + 1, n1, s.E, s.B, fit.beta, fit.obs_fi, E, s.gamma[E] / fam.dispersion)
            for k, s in enumerate(sels)
        ]
        bundle = assemble_matrices_wr(locals_, fit.obs_fi, n1 / n, E)
        opt = solve_selection_opt(bundle, fit.beta, n, np.concatenate([s.B for s in sels]))
        est = selective_mle(bundle, fit.beta, opt, n, fit.obs_fi)
        fi = selective_fisher(bundle, opt, fit.obs_fi)
        rep = infer(est, fi, n, config.alpha, coef=E)
    except DistSIError:
        # singular or degenerate replicate: keep the conservative all-ones row
        return pvals
    pvals[E] = rep.pvalue
    return pvals


def splitting_replicate(data: Dataset, config: MultisplitConfig, family: FamilySpec, penalty: PenaltySpec,
                        replicate: int = 0):
    """Single-split baseline: select on n1 samples, Wald p-values on the rest."""
    n, p = data.n, data.p
    n1 = config.subset_size(n)
    rng = _rng(config.seed, replicate, PURPOSE_SPLIT)
    perm = rng.permutation(n)
    a, b = np.sort(perm[:n1]), np.sort(perm[n1:])
    pvals = np.ones(p)
    _, sel = select(Dataset(data.X[a], data.y[a], 0), penalty, family, n)
    E = sel.E
    if E.size == 0 or E.size >= b.size:
        return pvals
    try:
        rep = baseline_infer("splitting", data.X[np.ix_(b, E)], data.y[b], family, config.alpha, coef=E)
    except DistSIError:
        return pvals
    pvals[E] = rep.pvalue
    return pvals


def pvalue_matrix(data, config, family, penalty, method="dist-si"):
    fn = run_replicate if method == "dist-si" else splitting_replicate
    P = np.vstack([fn(data, config, family, penalty, b) for b in range(config.B)])
    return np.clip(P, 0.0, 1.0)


def quantile_aggregate(pvals, gamma):
    """Q(gamma) for one predictor: min(1, ceil(gamma B)-th smallest of p / gamma)."""
    pv = np.sort(np.asarray(pvals, dtype=float))
    k = max(1, math.ceil(gamma * pv.size - 1e-12))
    return min(1.0, pv[k - 1] / gamma)


def aggregate_pvalues(P, gamma_min: float = 0.05):
    """Adaptive quantile aggregation over the rows of a B x p p-value matrix.

    ``Q_j`` only changes at ``gamma = i / B``; on each piece it is minimized
    at the right end, so the infimum over ``(gamma_min, 1)`` is attained on the
    breakpoints above ``gamma_min`` together with the left limit at
    ``gamma_min`` itself.
    """
    if not 0.0 < gamma_min < 1.0:
        raise InvalidInputError("gamma_min must lie in (0, 1)")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Bn = P.shape[0]
    grid = sorted({i / Bn for i in range(1, Bn + 1) if i / Bn > gamma_min} | {gamma_min})
    factor = 1.0 - math.log(gamma_min)
    out = np.empty(P.shape[1])
    for j in range(P.shape[1]):
        best = min(quantile_aggregate(P[:, j], g) for g in grid)
        out[j] = min(1.0, factor * best)
    return out


def dor(predicted, truth):
    """Diagnostic odds ratio with +0.5 added to every cell when any cell is zero."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise InvalidInputError("predicted and truth must have equal length")
    tp = float(np.sum(predicted & truth))
    tn = float(np.sum(~predicted & ~truth))
    fp = float(np.sum(predicted & ~truth))
    fn = float(np.sum(~predicted & truth))
    if min(tp, tn, fp, fn) == 0:
        tp, tn, fp, fn = tp + 0.5, tn + 0.5, fp + 0.5, fn + 0.5
    return tp * tn / (fp * fn)


def run_multisplit(data, config, family, penalty=None, method="dist-si"):
    """Aggregated p-values and rejections at ``config.alpha``."""
    if penalty is None:
        penalty = default_penalty(data, config)
    P = pvalue_matrix(data, config, family, penalty, method)
    agg = aggregate_pvalues(P, config.gamma_min)
    return agg, agg < config.alpha
