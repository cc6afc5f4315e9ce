"""
Monte Carlo harness for coverage, interval length and power.

Every replicate draws fresh node datasets and a fresh tuning set, tunes the
penalty level on the tuning set, runs the distributed protocol and the
baselines on the selected model, and scores each interval against the
projected target ``beta^E`` (the population minimizer of the selected-model
loss).  Random streams are keyed by ``(seed, replicate, purpose)`` so the
output does not depend on how replicates are scheduled.
"""

import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .engine import baseline_infer
from .errors import DistSIError, InvalidInputError
from .glm import Dataset, FamilySpec, fit_glm
from .lasso import DEFAULT_GRID, PenaltySpec, lambda_candidates, tune_lambda
from .protocol import AggregationRule, run_protocol

log = logging.getLogger(__name__)

ROW_HEADER = "rep,method,coef,covered,length,detected,model_size"
SUMMARY_HEADER = "method,coverage,coverage_se,mean_length,power"
ALL_METHODS = ("dist-si", "splitting", "naive")

# stream purposes
_DATA, _TUNE, _BETA, _ORACLE, _RULE = 1, 2, 3, 4, 5
_SCENARIO_LEVEL = 2**31 - 1
N_ORACLE = 200_000


@dataclass(frozen=True)
class ScenarioConfig:
    family: str = "gaussian"
    n_k: Union[int, Tuple[int, ...]] = 1000
    n0: int = 1000
    K: int = 2
    p: int = 100
    ar_rho: float = 0.9
    s: int = 5
    c: float = 0.1
    reps: int = 100
    seed: int = 0
    methods: Tuple[str, ...] = ALL_METHODS
    rule: str = "union"
    group_size: int = 5
    design: str = "ar1"
    group_rho: float = 0.9
    lambda_grid: Tuple[float, ...] = DEFAULT_GRID
    lambda_scale: Optional[float] = None
    n_tune: Optional[int] = None
    alpha: float = 0.1
    dispersion: str = "estimate"

    def __post_init__(self):
        fam = FamilySpec(self.family)
        object.__setattr__(self, "family", "gaussian" if fam.is_gaussian else "logistic")
        n_k = (self.n_k,) * self.K if isinstance(self.n_k, (int, np.integer)) else tuple(int(v) for v in self.n_k)
        if len(n_k) != self.K:
            raise InvalidInputError(f"n_k lists {len(n_k)} sizes for K={self.K}")
        object.__setattr__(self, "n_k", n_k)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "lambda_grid", tuple(float(t) for t in self.lambda_grid))
        checks = [
            (self.K >= 1, "K must be at least 1"),
            (all(v >= 1 for v in n_k), "n_k must be positive"),
            (self.n0 >= 1, "n0 must be positive"),
            (self.reps >= 1, "reps must be at least 1"),
            (self.p >= 1, "p must be positive"),
            (0 <= self.s <= self.p, "s must satisfy 0 <= s <= p"),
            (0.0 <= self.ar_rho < 1.0, "ar_rho must lie in [0, 1)"),
            (0.0 <= self.group_rho < 1.0, "group_rho must lie in [0, 1)"),
            (self.c >= 0, "c must be nonnegative"),
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (self.rule in ("union", "grouped"), "rule must be union or grouped"),
            (self.design in ("ar1", "grouped"), "design must be ar1 or grouped"),
            (self.group_size >= 1, "group_size must be positive"),
            (self.design != "grouped" or self.s <= -(-self.p // self.group_size),
             "s must not exceed the number of groups under the grouped design"),
            (set(self.methods) <= set(ALL_METHODS) and "dist-si" in self.methods,
             "methods must include dist-si and come from dist-si, splitting, naive"),
            (len(self.lambda_grid) > 0, "lambda_grid must be nonempty"),
            (self.lambda_scale is None or self.lambda_scale > 0, "lambda_scale must be positive"),
            (self.dispersion in ("known", "estimate"), "dispersion must be known or estimate"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidInputError(msg)

    @property
    def family_spec(self):
        if self.family == "gaussian":
            # the selected model is usually misspecified, so its noise level exceeds the true one
            return FamilySpec("gaussian", 1.0, self.dispersion)
        return FamilySpec(self.family)

    @property
    def n_total(self):
        return self.n0 + sum(self.n_k)

    @property
    def groups(self):
        return tuple(tuple(range(a, min(a + self.group_size, self.p))) for a in range(0, self.p, self.group_size))


def _rng(seed, replicate, purpose):
    return np.random.default_rng([int(seed), int(replicate), int(purpose)])


def gen_design(n, p, ar_rho, rng, *, groups=None, group_rho=0.9):
    """Gaussian rows with AR(1) covariance, or equicorrelated blocks when ``groups`` is given."""
    if not 0.0 <= ar_rho < 1.0:
        raise InvalidInputError("ar_rho must lie in [0, 1)")
    eps = rng.standard_normal((n, p))
    if groups is not None:
        X = np.sqrt(1.0 - group_rho) * eps
        shared = rng.standard_normal((n, len(groups)))
        for g, members in enumerate(groups):
            X[:, list(members)] += np.sqrt(group_rho) * shared[:, [g]]
        return X
    X = np.empty((n, p))
    X[:, 0] = eps[:, 0]
    scale = np.sqrt(1.0 - ar_rho ** 2)
    for j in range(1, p):
        X[:, j] = ar_rho * X[:, j - 1] + scale * eps[:, j]
    return X


def design_covariance(p, ar_rho, *, groups=None, group_rho=0.9):
    if groups is not None:
        S = np.eye(p)
        for members in groups:
            idx = np.array(members)
            S[np.ix_(idx, idx)] = group_rho
            S[idx, idx] = 1.0
        return S
    lags = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    return ar_rho ** lags


def make_beta(p, s, c, rng, *, groups=None):
    """``s`` nonzeros of magnitude sqrt(2 c log p) with random signs.

    With ``groups`` the nonzeros sit in ``s`` distinct groups.
    """
    if s > p:
        raise InvalidInputError("s must not exceed p")
    beta = np.zeros(p)
    if s == 0 or c == 0:
        return beta
    if groups is not None:
        chosen = rng.choice(len(groups), size=s, replace=False)
        support = np.array([groups[g][rng.integers(len(groups[g]))] for g in chosen])
    else:
        support = rng.choice(p, size=s, replace=False)
    beta[support] = rng.choice([-1.0, 1.0], size=s) * np.sqrt(2.0 * c * np.log(p))
    return beta


def gen_response(X, beta, family: FamilySpec, rng):
    eta = np.asarray(X) @ beta
    if family.is_gaussian:
        return eta + np.sqrt(family.dispersion) * rng.standard_normal(eta.shape[0])
    return (rng.random(eta.shape[0]) < expit(eta)).astype(float)


@lru_cache(maxsize=4)
def _oracle_design(seed, p, ar_rho, groups, group_rho, n_oracle):
    X = gen_design(n_oracle, p, ar_rho, _rng(seed, _SCENARIO_LEVEL, _ORACLE), groups=groups, group_rho=group_rho)
    X.setflags(write=False)
    return X


def projected_target(E, beta, family: FamilySpec, *, ar_rho=0.9, groups=None, group_rho=0.9,
                     seed=0, n_oracle=N_ORACLE, numeric=None):
    """Population minimizer of the loss restricted to the columns in ``E``.

    Gaussian uses the closed form ``Sigma_EE^{-1} Sigma_E. beta``; logistic
    fits the selected model to the conditional means on a large simulated
    design (shared per seed and design).  ``numeric=True`` forces the
    simulated route for Gaussian as well.
    """
    E = np.asarray(E, dtype=int)
    p = beta.shape[0]
    numeric = (not family.is_gaussian) if numeric is None else numeric
    if not numeric:
        Sig = design_covariance(p, ar_rho, groups=groups, group_rho=group_rho)
        return np.linalg.solve(Sig[np.ix_(E, E)], Sig[E] @ beta)
    X = _oracle_design(seed, p, ar_rho, groups, group_rho, n_oracle)
    eta = X @ beta
    mean = eta if family.is_gaussian else expit(eta)
    return fit_glm(X[:, E], mean, FamilySpec(family.kind), eta_limit=None).beta


@dataclass(frozen=True)
class MetricsRow:
    rep: int
    method: str
    coef: int
    covered: int
    length: float
    detected: int
    model_size: int

    def csv(self):
        return (f"{self.rep},{self.method},{self.coef},{self.covered},"
                f"{format(self.length, '.17g')},{self.detected},{self.model_size}")


@dataclass
class ReplicateResult:
    rep: int
    rows: List[MetricsRow] = field(default_factory=list)
    failed: Tuple[str, ...] = ()
    errors: Tuple[str, ...] = ()


def run_replicate(config: ScenarioConfig, rep: int) -> ReplicateResult:
    fam = config.family_spec
    groups = config.groups if config.design == "grouped" else None
    beta = make_beta(config.p, config.s, config.c, _rng(config.seed, rep, _BETA), groups=groups)
    rng = _rng(config.seed, rep, _DATA)
    nodes = []
    for k, n in enumerate((config.n0,) + config.n_k):
        X = gen_design(n, config.p, config.ar_rho, rng, groups=groups, group_rho=config.group_rho)
        nodes.append(Dataset(X, gen_response(X, beta, fam, rng), k))
    n_total = config.n_total

    rng_t = _rng(config.seed, rep, _TUNE)
    n_tune = config.n_tune or config.n0
    Xt = gen_design(n_tune, config.p, config.ar_rho, rng_t, groups=groups, group_rho=config.group_rho)
    yt = gen_response(Xt, beta, fam, rng_t)
    result = ReplicateResult(rep)
    try:
        if config.lambda_scale is not None:
            lam = lambda_candidates(yt, config.p, [config.lambda_scale])[0]
            penalty = PenaltySpec.uniform(lam, config.p)
        else:
            half = n_tune // 2
            penalty = tune_lambda(Dataset(Xt[:half], yt[:half]), Dataset(Xt[half:], yt[half:]),
                                  fam, config.lambda_grid, n_total=n_total)
        rule = (AggregationRule.contiguous(config.p, config.group_size, seed=int(_rng(config.seed, rep, _RULE).integers(2**31)))
                if config.rule == "grouped" else AggregationRule())
        res = run_protocol(nodes, fam, penalty, rule, config.alpha)
    except DistSIError as exc:
        result.failed = tuple(config.methods)
        result.errors = (f"{type(exc).__name__}: {exc}",)
        return result

    E = res.E
    try:
        target = projected_target(E, beta, fam, ar_rho=config.ar_rho, groups=groups,
                                  group_rho=config.group_rho, seed=config.seed)
    except DistSIError as exc:
        result.failed = tuple(config.methods)
        result.errors = (f"target: {type(exc).__name__}: {exc}",)
        return result
    reports = {"dist-si": res.report}
    failed, errors = [], []
    for method in config.methods:
        if method == "dist-si":
            continue
        use = nodes[:1] if method == "splitting" else nodes
        X = np.vstack([d.X[:, E] for d in use])
        y = np.concatenate([d.y for d in use])
        try:
            reports[method] = baseline_infer(method, X, y, fam, config.alpha, coef=E)
        except DistSIError as exc:
            failed.append(method)
            errors.append(f"{method}: {type(exc).__name__}: {exc}")
    signal = beta != 0
    for method in config.methods:
        if method not in reports:
            continue
        r = reports[method]
        for i, j in enumerate(r.coef):
            lo, hi = r.ci_lo[i], r.ci_hi[i]
            covered = int(lo <= target[i] <= hi)
            detected = int(signal[j] and (lo > 0 or hi < 0))
            result.rows.append(MetricsRow(rep, method, int(j), covered, float(hi - lo), detected, int(E.size)))
    result.failed = tuple(failed)
    result.errors = tuple(errors)
    return result


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("DISTSI_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    rows: List[MetricsRow]
    ok_reps: dict
    failures: dict
    errors: List[str]

    def summary(self):
        out = []
        for m in self.config.methods:
            rows = [r for r in self.rows if r.method == m]
            ok = self.ok_reps.get(m, 0)
            if rows:
                cov = np.array([r.covered for r in rows], dtype=float)
                c = float(cov.mean())
                se = float(cov.std(ddof=1) / np.sqrt(cov.size)) if cov.size > 1 else 0.0
                length = float(np.mean([r.length for r in rows]))
            else:
                c, se, length = float("nan"), float("nan"), float("nan")
            det = sum(r.detected for r in rows)
            power = det / (ok * self.config.s) if ok and self.config.s else float("nan")
            out.append((m, c, se, length, power))
        return out

    def rows_csv(self):
        buf = io.StringIO()
        buf.write(ROW_HEADER + "\n")
        for r in self.rows:
            buf.write(r.csv() + "\n")
        return buf.getvalue()

    def summary_csv(self):
        buf = io.StringIO()
        buf.write(SUMMARY_HEADER + "\n")
        for m, c, se, length, power in self.summary():
            buf.write(",".join([m] + [format(v, ".17g") for v in (c, se, length, power)]) + "\n")
        return buf.getvalue()

    def metric(self, method, name):
        for m, c, se, length, power in self.summary():
            if m == method:
                return dict(coverage=c, coverage_se=se, mean_length=length, power=power)[name]
        raise KeyError(method)


def run_scenario(config: ScenarioConfig, threads: Optional[int] = None) -> ScenarioResult:
    reps = range(config.reps)
    n_workers = _threads(threads)
    if n_workers > 1 and config.reps > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_replicate, [config] * config.reps, reps,
                                    chunksize=max(1, config.reps // (4 * n_workers))))
    else:
        results = [run_replicate(config, r) for r in reps]
    rows, errors = [], []
    ok = {m: 0 for m in config.methods}
    failures = {m: 0 for m in config.methods}
    for res in results:
        rows.extend(res.rows)
        for m in config.methods:
            if m in res.failed:
                failures[m] += 1
            else:
                ok[m] += 1
        for e in res.errors:
            log.warning("replicate %d excluded: %s", res.rep, e)
            errors.append(f"rep {res.rep}: {e}")
    return ScenarioResult(config, rows, ok, failures, errors)
