"""Barrier penalty for the sign constraint and the convex program it defines.

The orthant ``{V : S_j V_j > 0}`` is enforced by the smooth barrier

    Barr(V) = sum_j log(1 + 1 / (S_j V_j)),

which is finite inside the orthant, +inf outside, and vanishes as every
``S_j V_j`` grows.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError, OptimizationError

GRAD_TOL = 1e-8
# Newton aims well below GRAD_TOL so the contract survives round-off in re-evaluation
TARGET_TOL = 1e-11
MAX_ITER = 200


def barrier(V, S):
    """Return ``(value, gradient, diagonal Hessian)`` of the barrier at ``V``."""
    V = np.asarray(V, dtype=float)
    S = np.asarray(S, dtype=float)
    u = S * V
    if np.any(u <= 0) or not np.all(np.isfinite(u)):
        inf = np.full(V.shape, np.inf)
        return np.inf, inf, inf
    value = float(np.sum(np.log1p(1.0 / u)))
    grad = S * (1.0 / (u + 1.0) - 1.0 / u)
    hess = 1.0 / u ** 2 - 1.0 / (u + 1.0) ** 2
    return value, grad, hess


@dataclass(frozen=True)
class OptResult:
    """Solution of the barrier program in rescaled units ``W = sqrt(n) V``."""

    V_star: np.ndarray
    grad_norm: float
    barrier_hess: np.ndarray
    iterations: int
    W_star: np.ndarray = None


def minimize_barrier_quadratic(Q, mu, S, W0, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Damped Newton for ``0.5 (W - mu)'Q(W - mu) + Barr(W)``.

    Iterates toward ``min(tol, TARGET_TOL)``; if round-off stalls progress
    first, any iterate with gradient norm below ``tol`` is accepted.
    Returns ``(W, grad, hess_diag, iterations)``.
    """
    target = min(tol, TARGET_TOL)
    W = np.array(W0, dtype=float)
    if np.any(S * W <= 0):
        raise InvalidInputError("starting point is not sign-feasible")

    def f(w):
        b, _, _ = barrier(w, S)
        r = w - mu
        return 0.5 * r @ Q @ r + b

    val = f(W)
    prev_gnorm = np.inf
    for it in range(max_iter + 1):
        _, bg, bh = barrier(W, S)
        grad = Q @ (W - mu) + bg
        gnorm = float(np.max(np.abs(grad), initial=0.0))
        if gnorm < target:
            return W, grad, bh, it
        if it == max_iter:
            break
        if gnorm < tol and it > 0 and gnorm >= 0.5 * prev_gnorm:
            # no longer contracting: round-off floor reached inside the tolerance
            return W, grad, bh, it
        prev_gnorm = gnorm
        H = Q + np.diag(bh)
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise OptimizationError("Newton system is singular", iterate=W) from exc
        slope = grad @ step
        t = 1.0
        # stay strictly inside the orthant, never cross more than 99% of the way to the boundary
        u, du = S * W, S * step
        shrink = du < 0
        if np.any(shrink):
            t = min(1.0, 0.99 * float(np.min(-u[shrink] / du[shrink])))
        # tiny Newton decrement: objective differences are below round-off, take the step
        tiny = -slope < 1e-13 * (1.0 + abs(val))
        while True:
            cand = W + t * step
            new = f(cand)
            if np.isfinite(new) and (tiny or new <= val + 1e-4 * t * slope):
                break
            t *= 0.5
            if t < 1e-20:
                if gnorm < tol:
                    return W, grad, bh, it
                raise OptimizationError(
                    f"line search collapsed at gradient norm {gnorm:.3g}", iterate=W
                )
        W, val = cand, new
    if gnorm < tol:
        return W, grad, bh, it
    raise OptimizationError(f"no convergence in {max_iter} Newton steps", iterate=W)


def solve_selection_opt(bundle, beta_E, n, B_init) -> OptResult:
    """Solve the selection program at the aggregated MLE.

    ``B_init`` is the stacked observed Lasso coefficients ``(B_1, ..., B_K)``
    on the original scale; the program is solved in ``W = sqrt(n) V``.
    """
    rn = np.sqrt(n)
    S = bundle.S
    mu = bundle.mean(rn * np.asarray(beta_E, dtype=float))
    W0 = rn * np.asarray(B_init, dtype=float)
    if W0.shape != S.shape:
        raise InvalidInputError("B_init must stack the active coefficients of every node")
    if np.any(S * W0 <= 0):
        W0 = S * np.maximum(np.abs(mu), 1.0)
    W, grad, bh, it = minimize_barrier_quadratic(bundle.Gamma_inv, mu, S, W0)
    W.setflags(write=False)
    bh.setflags(write=False)
    return OptResult(
        V_star=W / rn,
        grad_norm=float(np.max(np.abs(grad), initial=0.0)),
        barrier_hess=np.diag(bh),
        iterations=it,
        W_star=W,
    )
