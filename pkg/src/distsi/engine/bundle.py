"""
Assembly of the matrices that describe the selection event at the central node.

Notation: ``E`` is the aggregated model (size d), ``E_k`` the model selected
on node k (size d_k) and ``dbar = sum d_k``.  The stacked vector of rescaled
Lasso coefficients ``W = sqrt(n) * (B_1, ..., B_K)`` is, conditionally on the
aggregated MLE, Gaussian with precision ``Gamma_inv`` and mean
``Psi sqrt(n) beta_E + tau``.  ``Theta``, ``Pi`` and ``kappa`` parametrize the
marginal law of ``sqrt(n) beta_E``.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..errors import DegenerateGeometryError, InvalidInputError, NoHoldoutError


@dataclass(frozen=True)
class LocalSummary:
    """What one node contributes to the central computation.

    ``info`` is the unit-dispersion observed information on E at the local
    MLE ``beta_E``.  ``gamma`` holds the Lasso subgradient on the coordinates
    listed in ``support``.  Node 0 (the holdout) has empty selection fields.
    """

    node_id: int
    n: int
    E_k: np.ndarray
    B: np.ndarray
    beta_E: np.ndarray
    info: np.ndarray
    support: np.ndarray
    gamma: np.ndarray
    yty: Optional[float] = None
    xty: Optional[np.ndarray] = None

    def gamma_on(self, coords):
        lookup = {int(j): v for j, v in zip(self.support, self.gamma)}
        try:
            return np.array([lookup[int(j)] for j in coords], dtype=float)
        except KeyError as exc:
            raise InvalidInputError(
                f"node {self.node_id} did not report the subgradient on coordinate {exc.args[0]}"
            ) from None


@dataclass(frozen=True)
class MatrixBundle:
    Gamma_inv: np.ndarray
    Gamma: np.ndarray
    Psi: np.ndarray
    tau: np.ndarray
    Theta_inv: np.ndarray
    Theta: np.ndarray
    Pi: np.ndarray
    kappa: np.ndarray
    S: np.ndarray
    rho: np.ndarray
    E: np.ndarray
    I_EE: np.ndarray
    block_index: Dict[int, Tuple[int, int]] = field(default_factory=dict)

    @property
    def d(self):
        return self.E.shape[0]

    @property
    def dbar(self):
        return self.Gamma_inv.shape[0]

    def mean(self, sqrt_n_beta_E):
        """Conditional mean of the stacked rescaled Lasso coefficients."""
        return self.Psi @ sqrt_n_beta_E + self.tau


def spd_inverse(M, what):
    M = 0.5 * (M + M.T)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError(f"{what} is not positive definite") from exc
    Linv = np.linalg.solve(L, np.eye(M.shape[0]))
    inv = Linv.T @ Linv
    return M, 0.5 * (inv + inv.T)


def _positions(index, coords, what):
    pos = {int(j): i for i, j in enumerate(index)}
    try:
        return np.array([pos[int(j)] for j in coords], dtype=int)
    except KeyError as exc:
        raise InvalidInputError(f"coordinate {exc.args[0]} of {what} missing from the information index") from None


def _blocks(E_sets):
    offsets, start = {}, 0
    for k, Ek in enumerate(E_sets, start=1):
        offsets[k] = (start, start + len(Ek))
        start += len(Ek)
    return offsets, start


def _finish(Ginv, GinvPsi, Ginvtau, Theta_inv_base, extra_kappa, I_EE, S, rho, E, offsets):
    Ginv, Gamma = spd_inverse(Ginv, "Gamma^{-1}")
    Psi = Gamma @ GinvPsi
    tau = Gamma @ Ginvtau
    Theta_inv, Theta = spd_inverse(Theta_inv_base - GinvPsi.T @ Psi, "Theta^{-1}")
    Pi = Theta @ I_EE
    kappa = Theta @ (Psi.T @ Ginvtau + extra_kappa)
    arrays = dict(
        Gamma_inv=Ginv, Gamma=Gamma, Psi=Psi, tau=tau, Theta_inv=Theta_inv,
        Theta=Theta, Pi=Pi, kappa=kappa, S=S, rho=rho, E=E, I_EE=I_EE,
    )
    for a in arrays.values():
        a.setflags(write=False)
    return MatrixBundle(block_index=offsets, **arrays)


def _prepare(locals_, info, E, E_sets, info_index, compensation):
    E = np.asarray(E, dtype=int)
    if E.size == 0:
        raise InvalidInputError("aggregated model is empty")
    if E_sets is None:
        E_sets = [np.asarray(s.E_k, dtype=int) for s in locals_]
    E_sets = [np.asarray(Ek, dtype=int) for Ek in E_sets]
    if len(E_sets) != len(locals_):
        raise InvalidInputError("need one selected set per selecting node")
    info = np.asarray(info, dtype=float)
    info_index = E if info_index is None else np.asarray(info_index, dtype=int)
    if info.shape != (info_index.size, info_index.size):
        raise InvalidInputError("information matrix does not match its index")
    comp = np.zeros(info_index.size) if compensation is None else np.asarray(compensation, float)
    if comp.shape != (info_index.size,):
        raise InvalidInputError("compensation must align with the information index")
    pE = _positions(info_index, E, "E")
    pk = [_positions(info_index, Ek, f"E_{k + 1}") for k, Ek in enumerate(E_sets)]
    I_EE = info[np.ix_(pE, pE)]
    # g[j][k] = node j's subgradient (plus compensation) on E_k; gE[j] on E
    g = [[s.gamma_on(Ek) + comp[pk[k]] for k, Ek in enumerate(E_sets)] for s in locals_]
    gE = [s.gamma_on(E) for s in locals_]
    S = np.concatenate([np.sign(np.asarray(s.B, dtype=float)) for s in locals_]) if locals_ else np.zeros(0)
    if np.any(S == 0):
        raise InvalidInputError("active Lasso coefficients must be nonzero")
    return E, E_sets, info, pE, pk, I_EE, g, gE, S


def assemble_matrices(
    locals_: Sequence[LocalSummary],
    I_hat,
    rho,
    E,
    E_sets=None,
    compensation=None,
    *,
    info_index=None,
) -> MatrixBundle:
    """Bundle for disjoint node samples.

    ``rho`` lists the sample fractions ``(rho_0, rho_1, ..., rho_K)`` with
    node 0 the holdout.  ``locals_`` are the K selecting nodes in order.
    ``I_hat`` is indexed by ``info_index`` (default ``E``); when some ``E_k``
    leaves ``E`` it must cover those coordinates and ``compensation`` carries
    ``sqrt(n) beta_perp`` on the same index (zero on E).
    """
    rho = np.asarray(rho, dtype=float)
    K = len(locals_)
    if rho.shape != (K + 1,):
        raise InvalidInputError(f"expected {K + 1} sample fractions, got {rho.shape[0]}")
    if rho[0] <= 0:
        raise NoHoldoutError("the holdout fraction rho_0 must be positive")
    if abs(rho.sum() - 1.0) > 1e-12:
        raise InvalidInputError("sample fractions must sum to one")
    E, E_sets, info, pE, pk, I_EE, g, gE, S = _prepare(
        locals_, I_hat, E, E_sets, info_index, compensation
    )
    r0, r = rho[0], rho[1:]
    offsets, dbar = _blocks(E_sets)

    Ginv = np.zeros((dbar, dbar))
    GinvPsi = np.zeros((dbar, E.size))
    Ginvtau = np.zeros(dbar)
    for k in range(K):
        a, b = offsets[k + 1]
        GinvPsi[a:b] = (r[k] / r0) * info[np.ix_(pk[k], pE)]
        Ginvtau[a:b] = -r[k] * g[k][k] - (r[k] / r0) * sum(r[j] * g[j][k] for j in range(K))
        for j in range(K):
            c, e = offsets[j + 1]
            coef = r[k] + r[k] ** 2 / r0 if j == k else r[j] * r[k] / r0
            Ginv[a:b, c:e] = coef * info[np.ix_(pk[k], pk[j])]
    extra = sum((r[j] / r0) * gE[j] for j in range(K))
    return _finish(Ginv, GinvPsi, Ginvtau, I_EE / r0, extra, I_EE, S, rho, E, offsets)


def assemble_matrices_wr(
    locals_: Sequence[LocalSummary],
    I_hat,
    rho: float,
    E,
    E_sets=None,
    compensation=None,
    *,
    info_index=None,
) -> MatrixBundle:
    """Bundle when each of K subsets of size ``rho * n`` is drawn from the full sample.

    ``I_hat`` here is the full-sample information and ``beta_E`` the full-sample MLE.
    """
    rho = float(rho)
    if not 0.0 < rho < 1.0:
        raise NoHoldoutError("subset fraction must lie strictly between 0 and 1")
    K = len(locals_)
    E, E_sets, info, pE, pk, I_EE, g, gE, S = _prepare(
        locals_, I_hat, E, E_sets, info_index, compensation
    )
    ratio = rho / (1.0 - rho)
    offsets, dbar = _blocks(E_sets)
    Ginv = np.zeros((dbar, dbar))
    GinvPsi = np.zeros((dbar, E.size))
    Ginvtau = np.zeros(dbar)
    for k in range(K):
        a, b = offsets[k + 1]
        Ginv[a:b, a:b] = ratio * info[np.ix_(pk[k], pk[k])]
        GinvPsi[a:b] = ratio * info[np.ix_(pk[k], pE)]
        Ginvtau[a:b] = -ratio * g[k][k]
    extra = sum(ratio * gE[j] for j in range(K))
    rho_vec = np.concatenate([[1.0 - rho], np.full(K, rho)])
    return _finish(Ginv, GinvPsi, Ginvtau, (1.0 + K * ratio) * I_EE, extra, I_EE, S, rho_vec, E, offsets)


def reconstruct_randomization(selection, beta_E, beta_perp, I_hat_full, n, E):
    """Randomization implied by node k's Lasso solution.

    ``I_hat_full`` is the p x p empirical information, ``beta_perp`` the
    residual-score vector on the complement of ``E`` and ``selection`` the
    node's SelectionSummary.
    """
    E = np.asarray(E, dtype=int)
    p = I_hat_full.shape[0]
    rn = np.sqrt(n)
    out = I_hat_full[:, selection.E] @ (rn * selection.B) - I_hat_full[:, E] @ (rn * np.asarray(beta_E))
    out = out + selection.gamma
    mask = np.ones(p, dtype=bool)
    mask[E] = False
    out[mask] += rn * np.asarray(beta_perp, dtype=float)
    return out
