import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distsi.engine import (
    LocalSummary,
    approx_selective_loglik,
    assemble_matrices,
    assemble_matrices_wr,
    barrier,
    baseline_infer,
    infer,
    reconstruct_randomization,
    selective_fisher,
    selective_mle,
    solve_selection_opt,
)
from distsi.engine.barrier import minimize_barrier_quadratic
from distsi.errors import DegenerateGeometryError, InsufficientHoldoutError, NoHoldoutError
from distsi.glm import GAUSSIAN, FamilySpec, fit_glm
from distsi.lasso import PenaltySpec, select

from _oracles import kronecker_bundle, random_bundle_case, random_spd

KEYS = ("Gamma_inv", "Psi", "tau", "Theta_inv", "Pi", "kappa")


def _closed(case, wr=False):
    kw = dict(info_index=np.arange(case["info"].shape[0]), compensation=case["comp"])
    if wr:
        return assemble_matrices_wr(case["locals_"], case["info"], case["rho_wr"], case["E"], case["E_sets"], **kw)
    return assemble_matrices(case["locals_"], case["info"], case["rho"], case["E"], case["E_sets"], **kw)


def _summary(E_k, B, gamma, support):
    return LocalSummary(node_id=1, n=10, E_k=np.asarray(E_k), B=np.asarray(B, float), beta_E=np.zeros(0),
                        info=np.zeros((0, 0)), support=np.asarray(support), gamma=np.asarray(gamma, float))


class TestBundle:
    def test_hand_evaluated_single_node(self):
        g = np.array([0.3, -1.2, 0.5])
        loc = _summary([0, 1, 2], [1.0, -1.0, 2.0], g, [0, 1, 2])
        b = assemble_matrices([loc], np.eye(3), [0.5, 0.5], [0, 1, 2])
        np.testing.assert_allclose(b.Gamma, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(b.Psi, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(b.tau, -g, atol=1e-14)
        np.testing.assert_allclose(b.Theta, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(b.Pi, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(b.kappa, 0.0, atol=1e-14)

    @pytest.mark.parametrize("K", [1, 2, 3])
    @pytest.mark.parametrize("general", [False, True])
    def test_matches_kronecker_construction(self, K, general):
        rng = np.random.default_rng(100 + K + 10 * general)
        for _ in range(10):
            case = random_bundle_case(rng, K, general=general)
            got = _closed(case)
            ref = kronecker_bundle(case["info"], case["rho"], case["E"], case["E_sets"],
                                   case["gammas"], case["comp"])
            for key in KEYS:
                np.testing.assert_allclose(getattr(got, key), ref[key], atol=1e-8, rtol=1e-8, err_msg=key)

    @pytest.mark.parametrize("K", [1, 2, 3])
    def test_with_replacement_matches_kronecker(self, K):
        rng = np.random.default_rng(7 + K)
        for _ in range(10):
            case = random_bundle_case(rng, K)
            case["rho_wr"] = rng.uniform(0.2, 0.8)
            got = _closed(case, wr=True)
            ref = kronecker_bundle(case["info"], case["rho_wr"], case["E"], case["E_sets"],
                                   case["gammas"], case["comp"], with_replacement=True)
            for key in KEYS:
                np.testing.assert_allclose(getattr(got, key), ref[key], atol=1e-8, rtol=1e-8, err_msg=key)

    def test_with_replacement_half_fraction(self):
        rng = np.random.default_rng(3)
        info = random_spd(rng, 3)
        g = rng.normal(size=3)
        loc = _summary([0, 2], [1.0, -0.5], g, [0, 1, 2])
        b = assemble_matrices_wr([loc], info, 0.5, [0, 1, 2])
        sub = info[np.ix_([0, 2], [0, 2])]
        np.testing.assert_allclose(b.Gamma_inv, sub, atol=1e-12)
        np.testing.assert_allclose(b.tau, -b.Gamma @ g[[0, 2]], atol=1e-12)
        np.testing.assert_allclose(b.Theta_inv, 2 * info - b.Psi.T @ b.Gamma_inv @ b.Psi, atol=1e-12)

    def test_with_replacement_block_diagonal(self):
        rng = np.random.default_rng(5)
        case = random_bundle_case(rng, 3)
        b = assemble_matrices_wr(case["locals_"], case["info"], 0.4, case["E"], case["E_sets"],
                                 info_index=np.arange(8))
        for j, (a0, a1) in b.block_index.items():
            for k, (c0, c1) in b.block_index.items():
                if j != k:
                    assert np.all(b.Gamma_inv[a0:a1, c0:c1] == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), K=st.integers(1, 3))
    def test_theta_pi_identity(self, seed, K):
        case = random_bundle_case(np.random.default_rng(seed), K)
        b = _closed(case)
        np.testing.assert_allclose(b.Theta_inv @ b.Pi, b.I_EE, atol=1e-8)
        assert np.linalg.eigvalsh(b.Gamma_inv).min() > 0
        assert np.linalg.eigvalsh(b.Theta_inv).min() > 0
        assert b.dbar == sum(len(s) for s in case["E_sets"])

    def test_no_holdout(self):
        loc = _summary([0], [1.0], [0.1], [0])
        with pytest.raises(NoHoldoutError):
            assemble_matrices([loc], np.eye(1), [0.0, 1.0], [0])

    def test_degenerate_information(self):
        loc = _summary([0, 1], [1.0, 1.0], [0.1, 0.2], [0, 1])
        with pytest.raises(DegenerateGeometryError):
            assemble_matrices([loc], np.ones((2, 2)), [0.5, 0.5], [0, 1])


class TestBarrier:
    def test_infeasible_is_infinite(self):
        v, g, h = barrier([1.0, -0.5], [1, 1])
        assert v == np.inf

    def test_unit_point(self):
        v, g, h = barrier([1.0], [1])
        assert v == pytest.approx(np.log(2.0), abs=1e-15)
        assert g[0] == pytest.approx(-0.5, abs=1e-15)
        assert h[0] == pytest.approx(0.75, abs=1e-15)

    def test_finite_difference(self):
        S = np.array([1.0, -1.0, 1.0])
        V = np.array([0.7, -2.0, 0.05])
        _, g, h = barrier(V, S)
        eps = 1e-6
        for j in range(3):
            e = np.zeros(3)
            e[j] = eps
            fd = (barrier(V + e, S)[0] - barrier(V - e, S)[0]) / (2 * eps)
            assert fd == pytest.approx(g[j], rel=1e-6)
            fd2 = (barrier(V + e, S)[1][j] - barrier(V - e, S)[1][j]) / (2 * eps)
            assert fd2 == pytest.approx(h[j], rel=1e-5)

    def test_vanishes_far_inside(self):
        assert barrier([1e12], [1])[0] < 1e-11

    @pytest.mark.parametrize("mu,q", [(2.0, 1.0), (-3.0, 0.5), (0.1, 4.0), (25.0, 0.2)])
    def test_one_dimensional_grid(self, mu, q):
        W, grad, _, _ = minimize_barrier_quadratic(np.array([[q]]), np.array([mu]), np.array([1.0]), np.array([1.0]))
        grid = np.logspace(-6, 3, 1_000_000)
        obj = 0.5 * q * (grid - mu) ** 2 + np.log1p(1.0 / grid)
        assert abs(W[0] - grid[np.argmin(obj)]) < 1e-4 * max(1.0, W[0])
        assert abs(grad[0]) < 1e-8

    def test_deep_interior_near_mean(self):
        rng = np.random.default_rng(0)
        Q = random_spd(rng, 4)
        sd = np.sqrt(np.diag(np.linalg.inv(Q)))
        S = np.array([1.0, -1.0, 1.0, -1.0])
        mu = S * 12 * sd
        W, grad, _, _ = minimize_barrier_quadratic(Q, mu, S, S.copy())
        assert np.max(np.abs(W - mu)) < 0.2
        assert np.all(S * W > 0)


def _pipeline_instance(seed, family=GAUSSIAN, K=2, p=10, n_k=200, n0=200):
    from _oracles import make_nodes
    rng = np.random.default_rng(seed)
    beta = np.zeros(p)
    beta[:3] = [1.0, -0.8, 0.6]
    nodes = make_nodes(rng, [n0] + [n_k] * K, p, beta, family)
    n = sum(d.n for d in nodes)
    pen = PenaltySpec.uniform(1.5 if family.is_gaussian else 0.6, p)
    sels = [select(d, pen, family, n)[1] for d in nodes[1:]]
    E = np.unique(np.concatenate([s.E for s in sels]))
    from distsi.glm import aggregate_mle
    fits = [fit_glm(d.X[:, E], d.y, family) for d in nodes]
    rho = np.array([d.n for d in nodes], float) / n
    beta_E, I_hat = aggregate_mle(fits, rho)
    locals_ = [LocalSummary(k + 1, d.n, s.E, s.B, f.beta, f.obs_fi, E, s.gamma[E])
               for k, (d, s, f) in enumerate(zip(nodes[1:], sels, fits[1:]))]
    bundle = assemble_matrices(locals_, I_hat, rho, E)
    opt = solve_selection_opt(bundle, beta_E, n, np.concatenate([s.B for s in sels]))
    return dict(nodes=nodes, sels=sels, E=E, beta_E=beta_E, I_hat=I_hat, bundle=bundle, opt=opt, n=n)


class TestSelective:
    @pytest.mark.parametrize("seed", range(4))
    def test_optimizer_stationary(self, seed):
        inst = _pipeline_instance(seed)
        b, opt = inst["bundle"], inst["opt"]
        W = opt.W_star
        grad = b.Gamma_inv @ (W - b.mean(np.sqrt(inst["n"]) * inst["beta_E"])) + barrier(W, b.S)[1]
        assert np.max(np.abs(grad)) < 1e-8
        assert opt.grad_norm < 1e-8
        assert np.all(b.S * opt.V_star > 0)

    def test_identity_reduction(self):
        d = 2
        g = np.zeros(d)
        loc = _summary([0, 1], [5.0, 5.0], g, [0, 1])
        b = assemble_matrices([loc], np.eye(d), [0.5, 0.5], [0, 1])
        beta_E = np.array([0.3, -0.2])
        from distsi.engine.barrier import OptResult
        W = b.mean(np.sqrt(100) * beta_E)
        fake = OptResult(V_star=W / 10, grad_norm=0.0, barrier_hess=np.zeros((d, d)), iterations=0, W_star=W)
        np.testing.assert_allclose(selective_mle(b, beta_E, fake, 100, np.eye(d)), beta_E, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("family", [GAUSSIAN, FamilySpec("logit")])
    def test_mle_zeroes_approximate_score(self, seed, family):
        inst = _pipeline_instance(seed, family)
        b, n = inst["bundle"], inst["n"]
        est = selective_mle(b, inst["beta_E"], inst["opt"], n, inst["I_hat"])
        h = 1e-4
        for j in range(est.size):
            e = np.zeros(est.size)
            e[j] = h
            fd = (approx_selective_loglik(b, inst["beta_E"], n, est + e)
                  - approx_selective_loglik(b, inst["beta_E"], n, est - e)) / (2 * h * np.sqrt(n))
            assert abs(fd) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_fisher_matches_fd_hessian(self, seed):
        inst = _pipeline_instance(seed + 10)
        b, n = inst["bundle"], inst["n"]
        est = selective_mle(b, inst["beta_E"], inst["opt"], n, inst["I_hat"])
        F = selective_fisher(b, inst["opt"], inst["I_hat"])
        d = est.size
        h = 1e-2 / np.sqrt(n)   # step of 0.01 on the theta scale
        f0 = approx_selective_loglik(b, inst["beta_E"], n, est)
        H = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
                H[i, j] = (approx_selective_loglik(b, inst["beta_E"], n, est + ei + ej)
                           - approx_selective_loglik(b, inst["beta_E"], n, est + ei - ej)
                           - approx_selective_loglik(b, inst["beta_E"], n, est - ei + ej)
                           + approx_selective_loglik(b, inst["beta_E"], n, est - ei - ej)) / (4 * h * h * n)
        assert np.isfinite(f0)
        assert np.max(np.abs(-H - F)) / np.max(np.abs(F)) < 1e-3
        assert np.linalg.eigvalsh(F).min() > 0

    def test_fisher_without_barrier_curvature(self):
        inst = _pipeline_instance(3)
        b, I = inst["bundle"], inst["I_hat"]
        from dataclasses import replace
        flat = replace(inst["opt"], barrier_hess=np.zeros_like(inst["opt"].barrier_hess))
        F = selective_fisher(b, flat, I)
        # with no barrier curvature the Psi terms cancel exactly
        np.testing.assert_allclose(F, I @ b.Theta @ I, rtol=1e-9)

    def test_single_node_equal_split_formula(self):
        # one selecting node with E_1 = E and rho_0 = rho_1 = 1/2
        from _oracles import make_nodes
        rng = np.random.default_rng(11)
        p = 6
        beta = np.array([1.0, -1.0, 0.5, 0, 0, 0])
        nodes = make_nodes(rng, [300, 300], p, beta, GAUSSIAN)
        n = 600
        pen = PenaltySpec.uniform(1.0, p)
        _, sel = select(nodes[1], pen, GAUSSIAN, n)
        E = sel.E
        fits = [fit_glm(d.X[:, E], d.y, GAUSSIAN) for d in nodes]
        from distsi.glm import aggregate_mle
        beta_E, I = aggregate_mle(fits, [0.5, 0.5])
        loc = LocalSummary(1, 300, E, sel.B, fits[1].beta, fits[1].obs_fi, E, sel.gamma[E])
        b = assemble_matrices([loc], I, [0.5, 0.5], E)
        opt = solve_selection_opt(b, beta_E, n, sel.B)
        est = selective_mle(b, beta_E, opt, n, I)
        rn = np.sqrt(n)
        # direct: Gamma = I^{-1}, Psi = I, tau = -I^{-1} gamma_E, Theta = I^{-1}, Pi = I, kappa = 0
        mu = rn * beta_E - np.linalg.solve(I, sel.gamma[E])
        direct = beta_E + np.linalg.solve(I, I @ (mu - opt.W_star)) / rn
        np.testing.assert_allclose(est, direct, atol=1e-8)


class TestInfer:
    def test_zero_estimate_has_unit_pvalue(self):
        r = infer(np.array([0.0]), np.eye(1), 100, 0.1)
        assert r.pvalue[0] == 1.0

    def test_pvalue_at_critical_value(self):
        n = 100
        z = 1.644854
        r = infer(np.array([z / np.sqrt(n)]), np.eye(1), n, 0.1)
        assert r.pvalue[0] == pytest.approx(0.1, abs=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(est=st.floats(-5, 5), var=st.floats(0.1, 10), alpha=st.floats(0.01, 0.5))
    def test_interval_is_symmetric(self, est, var, alpha):
        r = infer(np.array([est]), np.array([[1.0 / var]]), 50, alpha)
        assert r.ci_lo[0] < r.ci_hi[0]
        assert 0.5 * (r.ci_lo[0] + r.ci_hi[0]) == pytest.approx(est, abs=1e-12)
        assert 0.0 <= r.pvalue[0] <= 1.0


class TestBaselines:
    def test_splitting_gaussian_textbook(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(40, 3))
        y = X @ [1.0, 0.0, -1.0] + rng.normal(size=40)
        fam = FamilySpec("gaussian", 1.0, "estimate")
        r = baseline_infer("splitting", X, y, fam, 0.1)
        coef = np.linalg.solve(X.T @ X, X.T @ y)
        sigma = np.sqrt(np.sum((y - X @ coef) ** 2) / 37)
        half = 1.6448536269514722 * np.sqrt(np.diag(np.linalg.inv(X.T @ X))) * sigma
        np.testing.assert_allclose(r.ci_hi - r.ci_lo, 2 * half, rtol=1e-10)
        np.testing.assert_allclose(r.estimate, coef, atol=1e-10)

    def test_naive_equals_splitting_on_same_data(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(30, 2))
        y = X[:, 0] + rng.normal(size=30)
        a = baseline_infer("naive", X, y, GAUSSIAN, 0.1)
        b = baseline_infer("splitting", X, y, GAUSSIAN, 0.1)
        np.testing.assert_allclose(a.ci_lo, b.ci_lo)
        np.testing.assert_allclose(a.pvalue, b.pvalue)

    def test_insufficient_holdout(self):
        with pytest.raises(InsufficientHoldoutError):
            baseline_infer("splitting", np.ones((2, 3)), np.ones(2), GAUSSIAN, 0.1)

    @pytest.mark.slow
    def test_fixed_model_coverage(self):
        rng = np.random.default_rng(6)
        beta = np.array([0.5, -0.3, 0.0])
        hits = {"naive": 0, "splitting": 0}
        reps = 1000
        for _ in range(reps):
            X = rng.normal(size=(60, 3))
            y = X @ beta + rng.normal(size=60)
            for kind in hits:
                r = baseline_infer(kind, X, y, GAUSSIAN, 0.1)
                hits[kind] += (r.ci_lo[0] <= beta[0] <= r.ci_hi[0])
        for kind, h in hits.items():
            assert abs(h / reps - 0.9) < 0.03, kind


class TestReconstruction:
    def test_cancellation(self):
        from distsi.lasso import SelectionSummary
        E = np.array([0, 2])
        B = np.array([0.5, -1.0])
        sel = SelectionSummary(E=E, S=np.sign(B), B=B, Z=np.zeros(2), gamma=np.zeros(4))
        out = reconstruct_randomization(sel, B, np.zeros(2), random_spd(np.random.default_rng(0), 4), 100, E)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gaussian_matches_definition(self, seed):
        from _oracles import direct_omega
        from distsi.glm import residual_score
        inst = _pipeline_instance(seed)
        nodes, n, E = inst["nodes"], inst["n"], inst["E"]
        X = np.vstack([d.X for d in nodes])
        y = np.concatenate([d.y for d in nodes])
        I_full = X.T @ X / n
        beta_perp = residual_score(X, y, inst["beta_E"], E)
        for k, sel in enumerate(inst["sels"], start=1):
            beta_lasso = np.zeros(X.shape[1])
            beta_lasso[sel.E] = sel.B
            ref = direct_omega(X, y, nodes[k].X, nodes[k].y, beta_lasso, sel.gamma, GAUSSIAN, n)
            got = reconstruct_randomization(sel, inst["beta_E"], beta_perp, I_full, n, E)
            np.testing.assert_allclose(got, ref, atol=1e-8)
