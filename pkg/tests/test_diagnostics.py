import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from krylovgp.diagnostics import (InconsistencyGap, KLReport, inconsistency_gap, kl_decomposition,
                                  kl_gaussians, mse, partial_trace_check, perturbation_sweep,
                                  projector_hs_distance, relative_eig_error, relative_rank,
                                  series_empirical_eigenvalues)
from krylovgp.itergp import (closed_form_C_cg, closed_form_C_ev, closed_form_C_lanczos,
                             initial_state, policy_custom, run_itergp)
from krylovgp.kernels import cosine_features, kernel_matrix, population_eigenvalues, series
from krylovgp.spectral import cg_solve, dense_eig, kernel_lanczos

from conftest import matern_instance, random_spd


class TestKLGaussians:
    def test_identical(self, rng):
        S = random_spd(4, rng)
        assert kl_gaussians(np.ones(4), S, np.ones(4), S) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift(self):
        assert kl_gaussians([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5, abs=1e-15)

    def test_scalar_variances(self):
        # KL(N(0,a) || N(0,b)) = (a/b - 1 - log(a/b)) / 2
        a, b = 0.3, 2.0
        assert kl_gaussians([0.0], [[a]], [0.0], [[b]]) == pytest.approx(0.5 * (a / b - 1 - math.log(a / b)), rel=1e-14)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(42)
        mu1, mu2 = rng.standard_normal(4), rng.standard_normal(4)
        S1, S2 = random_spd(4, rng, cond=5.0), random_spd(4, rng, cond=5.0)
        samples = rng.multivariate_normal(mu1, S1, size=1_000_000)
        ratio = stats.multivariate_normal(mu1, S1).logpdf(samples) - stats.multivariate_normal(mu2, S2).logpdf(samples)
        est, se = ratio.mean(), ratio.std(ddof=1) / math.sqrt(ratio.size)
        assert abs(kl_gaussians(mu1, S1, mu2, S2) - est) <= 3 * se

    def test_singular_covariance_falls_back(self):
        S = np.diag([1.0, 0.0])
        kl, info = kl_gaussians([0.0, 0.0], S, [0.0, 0.0], S, return_info=True)
        assert info["regularized"]
        assert kl == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_gaussians([0.0], [[1.0]], [0.0, 1.0], np.eye(2))

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
    def test_non_negative(self, seed, k):
        rng = np.random.default_rng(seed)
        kl = kl_gaussians(rng.standard_normal(k), random_spd(k, rng), rng.standard_normal(k), random_spd(k, rng))
        assert kl >= -1e-10


def ev_setup(n=30, seed=0):
    X, Y, K, s2 = matern_instance(n, seed)
    return K, Y, s2, dense_eig(K / n)


class TestKLDecomposition:
    def test_full_precision_is_zero(self):
        K, Y, s2, es = ev_setup()
        C = np.linalg.inv(K + s2 * np.eye(30))
        rep = kl_decomposition(K, s2, C, Y, eig=es)
        for t in (rep.term_trace, rep.term_quadratic, rep.term_logdet, rep.total):
            assert abs(t) < 1e-6
        assert isinstance(rep, KLReport) and set(rep.to_dict()) >= {"total", "direct"}

    def test_zero_precision_is_prior_vs_posterior(self):
        K, Y, s2, es = ev_setup(20, seed=1)
        rep = kl_decomposition(K, s2, initial_state(20), Y, eig=es)
        Ks = K + s2 * np.eye(20)
        post_cov = K - K @ np.linalg.solve(Ks, K)
        expected = kl_gaussians(np.zeros(20), K, K @ np.linalg.solve(Ks, Y), post_cov)
        assert rep.total == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("m", [1, 5, 12, 29])
    def test_ev_spectral_formula(self, m):
        n = 30
        K, Y, s2, es = ev_setup(n, seed=2)
        rep = kl_decomposition(K, s2, closed_form_C_ev(es, m, s2, n), Y, eig=es)
        mu = n * es.values[m:]
        y = es.vectors[:, m:].T @ Y
        assert rep.term_trace == pytest.approx(np.sum(mu) / s2, rel=1e-6)
        assert rep.term_quadratic == pytest.approx(np.sum(mu * y ** 2 / (s2 * (mu + s2))), rel=1e-6)
        assert rep.term_logdet == pytest.approx(-np.sum(np.log1p(mu / s2)), rel=1e-6)

    @given(st.integers(0, 10 ** 6), st.integers(0, 25), st.sampled_from(["ev", "lanczos", "cg"]))
    def test_total_matches_direct(self, seed, m, kind):
        n = 25
        K, Y, s2, es = ev_setup(n, seed=seed % 50)
        if kind == "ev":
            C = closed_form_C_ev(es, m, s2, n)
        elif kind == "lanczos":
            m = max(m, 1)
            C = closed_form_C_lanczos(kernel_lanczos(K, Y / np.linalg.norm(Y), m), m, s2, n)
        else:
            cg = cg_solve(K + s2 * np.eye(n), Y, m, reorthogonalize=True)
            C = closed_form_C_cg(cg.directions, cg.etas, cg.steps, n=n)
        rep = kl_decomposition(K, s2, C, Y, eig=es)
        terms = rep.term_trace + rep.term_quadratic + rep.term_logdet
        assert abs(terms - 2 * rep.direct) <= 1e-6 * max(1.0, abs(rep.direct))
        assert rep.term_logdet <= 1e-10
        assert rep.direct >= -1e-10

    def test_monotone_in_m_for_ev(self):
        n = 30
        K, Y, s2, es = ev_setup(n, seed=3)
        kls = [kl_decomposition(K, s2, closed_form_C_ev(es, m, s2, n), Y, eig=es, direct=False).total
               for m in range(n + 1)]
        assert np.all(np.diff(kls) <= 1e-8)

    def test_separate_mean_weights(self):
        n = 20
        K, Y, s2, es = ev_setup(n, seed=4)
        Ks = K + s2 * np.eye(n)
        C = closed_form_C_ev(es, 5, s2, n)
        w = np.linalg.solve(Ks, Y)
        rep = kl_decomposition(K, s2, C, Y, eig=es, w=w)
        assert rep.term_quadratic == pytest.approx(0.0, abs=1e-10)
        assert abs(rep.term_trace + rep.term_logdet - 2 * rep.direct) <= 1e-6 * max(1.0, rep.direct)

    def test_dense_and_state_inputs_agree(self):
        n = 15
        K, Y, s2, es = ev_setup(n, seed=5)
        state = run_itergp(K + s2 * np.eye(n), Y, policy_custom(es.vectors[:, :4]), 4)
        a = kl_decomposition(K, s2, state, Y)
        b = kl_decomposition(K, s2, state.dense_C(), Y)
        assert a.total == pytest.approx(b.total, rel=1e-10)

    def test_rejects_large_n(self):
        with pytest.raises(ValueError):
            kl_decomposition(np.zeros((3001, 1)), 0.1, None, np.zeros(3001))

    def test_rejects_bad_shape(self):
        K, Y, s2, es = ev_setup(5)
        with pytest.raises(ValueError):
            kl_decomposition(K, s2, np.eye(4), Y)


class TestSmallMetrics:
    def test_mse(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert mse([1.5, 2.5, 3.5], [1.0, 2.0, 3.0]) == pytest.approx(0.25)
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])

    def test_projector_distance_examples(self):
        assert projector_hs_distance([1.0, 0.0], [1.0, 0.0]) == 0.0
        assert projector_hs_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.sqrt(2))
        s = 1 / math.sqrt(2)
        assert projector_hs_distance([1.0, 0.0], [s, s]) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            projector_hs_distance([1.0, 1.0], [1.0, 0.0])

    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 10))
    def test_projector_distance_matches_dense(self, seed, k):
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal(k), rng.standard_normal(k)
        u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
        d = projector_hs_distance(u, v)
        assert 0.0 <= d <= math.sqrt(2) + 1e-15
        assert d == pytest.approx(np.linalg.norm(np.outer(u, u) - np.outer(v, v)), abs=1e-7)

    def test_relative_eig_error(self):
        pop = np.array([1.0, 0.5, 0.25])
        assert relative_eig_error(pop, pop, 3) == 0.0
        assert relative_eig_error([1.0, 1.0, 0.25], pop, 3) == 1.0
        with pytest.raises(ValueError):
            relative_eig_error(pop, pop, 4)

    def test_relative_rank_example(self):
        assert relative_rank([0.5, 0.25, 0.125], 1) == pytest.approx(10 / 3, rel=1e-14)

    def test_relative_rank_repeated(self):
        assert relative_rank([1.0, 0.5, 0.5], 2) == math.inf

    def test_relative_rank_grows_like_m_log_m(self):
        lam = population_eigenvalues(series("polynomial", tau=1.0, alpha=1.0, truncation=2000))
        ratios = [relative_rank(lam, i) / (i * math.log(i + 1)) for i in (5, 10, 20, 40, 80)]
        assert max(ratios) / min(ratios) < 3.0
        assert all(relative_rank(lam, i) < relative_rank(lam, i + 1) for i in range(1, 50))

    def test_relative_rank_index(self):
        with pytest.raises(ValueError):
            relative_rank([1.0, 0.5], 3)


class TestInconsistency:
    def test_orthogonal_data_gives_zero(self):
        _, _, K, s2 = matern_instance(20, 0)
        es = dense_eig(K / 20)
        Y = es.vectors[:, 1] + 0.5 * es.vectors[:, 4]
        gap = inconsistency_gap(K, s2, Y, eigsys=es)
        assert abs(gap.closed_form) < 1e-20 and abs(gap.direct) < 1e-12

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_closed_form_matches_direct(self, seed):
        _, Y, K, s2 = matern_instance(20, seed)
        gap = inconsistency_gap(K, s2, Y)
        assert isinstance(gap, InconsistencyGap)
        assert gap.closed_form == pytest.approx(gap.direct, rel=1e-8)
        assert float(gap) == gap.closed_form

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            inconsistency_gap(np.eye(1), 0.1, np.ones(1))


class TestSeriesDiagnostics:
    def test_empirical_eigenvalues_both_routes(self, rng):
        X = rng.uniform(size=30)
        for J in (10, 60):
            spec = series("polynomial", tau=1.0, alpha=1.0, truncation=J)
            K = kernel_matrix(spec, X)
            expected = np.sort(np.linalg.eigvalsh(K / 30))[::-1][:5]
            np.testing.assert_allclose(series_empirical_eigenvalues(spec, X, 5), expected, rtol=1e-9, atol=1e-14)

    def test_empirical_eigenvalues_need_truncation(self, rng):
        with pytest.raises(ValueError):
            series_empirical_eigenvalues(series("polynomial", tau=1.0), rng.uniform(size=5), 2)

    def test_total_trace_expectation(self):
        # E phi_j(X)^2 = 1 under a uniform design, so E tr(K/n) = sum lambda_j
        spec = series("exponential", tau=0.5, truncation=30)
        rep = partial_trace_check(spec, 200, 0, range(20))
        assert rep.population_tail == pytest.approx(np.sum(population_eigenvalues(spec)))
        assert abs(rep.mean_empirical_tail - rep.population_tail) <= 4 * rep.standard_error * rep.population_tail

    def test_full_rank_tail_is_zero(self):
        spec = series("polynomial", tau=1.0, alpha=1.0, truncation=40)
        rep = partial_trace_check(spec, 10, 10, range(3))
        assert rep.mean_empirical_tail == 0.0
        assert rep.to_dict()["holds"] is True

    def test_partial_trace_rejects_stationary(self):
        from krylovgp.kernels import matern
        with pytest.raises(ValueError):
            partial_trace_check(matern(0.6), 10, 2, [0])

    def test_perturbation_sweep_structure(self):
        spec = series("polynomial", tau=1.0, alpha=1.0, truncation=64)
        out = perturbation_sweep(spec, [100, 200], 3, range(4))
        assert set(out) == {100, 200}
        assert len(out[100]["errors"]) == 4
        assert out[100]["median"] == pytest.approx(np.median(out[100]["errors"]))

    def test_lanczos_projectors_converge(self):
        spec = series("exponential", tau=0.5, truncation=64)
        X = np.random.default_rng(3).uniform(size=200)
        K = kernel_matrix(spec, X)
        es = dense_eig(K / 200)
        v0 = np.random.default_rng(4).standard_normal(200)
        v0 /= np.linalg.norm(v0)
        m = 4
        worst = []
        for mt in range(m, 4 * m + 1):
            res = kernel_lanczos(K, v0, mt)
            worst.append(max(projector_hs_distance(es.vectors[:, i], res.vectors[:, i]) for i in range(m)))
        assert np.all(np.diff(worst) <= 1e-3)
        assert worst[-1] < worst[0]
