import numpy as np
import pytest

from mrpgo.gnc import (
    GncState,
    TlsConfig,
    centralized_gnc_pgo,
    gnc_converged,
    init_mu,
    threshold_from_probability,
    tls_weight,
    tls_weights,
)
from mrpgo.pose_graph import Truth, inject_outliers, synth_grid
from mrpgo.solver import odometry_init, solve_weighted_pgo


class TestThreshold:
    def test_chi2_table_values(self):
        # frozen from standard chi-square quantile tables
        assert abs(threshold_from_probability(0.5, 1) - 0.4549) < 1e-3
        assert abs(threshold_from_probability(0.99, 3) - 11.345) < 1e-3

    def test_small_p_limit(self):
        assert threshold_from_probability(1e-12, 6) < 1e-3
        assert threshold_from_probability(1e-30, 6) < threshold_from_probability(1e-12, 6)

    def test_monotone_in_p(self):
        ps = np.linspace(0.05, 0.95, 10)
        vals = [threshold_from_probability(p, 6) for p in ps]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_domain(self):
        with pytest.raises(ValueError):
            threshold_from_probability(1.0, 3)


class TestTlsWeight:
    def test_zero_residual_is_inlier(self):
        assert tls_weight(0.0, 2.0, 1.0) == 1.0

    def test_branch_boundaries_exact(self):
        # symbolic: w(hi) = sqrt(mu^2) - mu = 0, w(lo) = (mu+1) - mu = 1
        for mu in (0.01, 0.5, 1.0, 7.3):
            for c2 in (0.25, 1.0, 5.35):
                hi = (mu + 1.0) / mu * c2
                lo = mu / (mu + 1.0) * c2
                assert tls_weight(hi, mu, c2) == 0.0
                assert abs(tls_weight(lo, mu, c2) - 1.0) < 1e-12

    def test_continuity_across_boundaries(self):
        mu, c2 = 0.7, 2.0
        for boundary in (mu / (mu + 1.0) * c2, (mu + 1.0) / mu * c2):
            below = tls_weight(boundary - 1e-6, mu, c2)
            above = tls_weight(boundary + 1e-6, mu, c2)
            assert abs(below - above) < 1e-4

    def test_monotone_nonincreasing(self):
        mu, c2 = 1.3, 3.0
        r2 = np.linspace(0, 4 * c2, 500)
        w = tls_weights(r2, mu, c2)
        assert np.all(np.diff(w) <= 1e-12)
        assert np.all((w >= 0) & (w <= 1))

    def test_large_mu_approaches_indicator(self):
        c2 = 2.0
        r2 = np.array([0.5 * c2, 0.99 * c2, 1.01 * c2, 2.0 * c2])
        w = tls_weights(r2, 1e8, c2)
        assert np.allclose(w[:2], 1.0, atol=1e-3)
        assert np.allclose(w[2:], 0.0, atol=1e-3)


class TestInitMu:
    def test_equal_residual(self):
        assert abs(init_mu(1.0, 1.0) - 1.0) < 1e-12

    def test_three_halves(self):
        assert abs(init_mu(1.5, 1.0) - 0.5) < 1e-12

    def test_huge_residual_clamped(self):
        assert init_mu(1e12, 1.0) == pytest.approx(1e-6, abs=1e-9)

    def test_all_inliers_shortcut(self):
        # denominator non-positive: surrogate may start at the TLS limit
        assert init_mu(0.4, 1.0) >= 1.0


class TestConvergence:
    CFG = TlsConfig(c_bar_sq=1.0, weight_convergence_tol=1e-4)

    def test_stable_binary_weights(self):
        w = {0: 1.0, 1: 0.0, 2: 1.0}
        state = GncState(mu=5.0, weights=dict(w), outer_iter=3)
        assert gnc_converged(state, dict(w), self.CFG)

    def test_changed_weight_blocks(self):
        prev = {0: 1.0, 1: 0.5}
        cur = {0: 1.0, 1: 1.0}
        state = GncState(mu=5.0, weights=cur, outer_iter=3)
        assert not gnc_converged(state, prev, self.CFG)

    def test_nonbinary_blocks(self):
        w = {0: 0.4}
        state = GncState(mu=5.0, weights=dict(w), outer_iter=3)
        assert not gnc_converged(state, dict(w), self.CFG)

    def test_iteration_cap(self):
        w = {0: 0.4}
        state = GncState(mu=5.0, weights=dict(w), outer_iter=self.CFG.max_outer_iters)
        assert gnc_converged(state, {0: 0.9}, self.CFG)


class TestCentralizedGnc:
    def test_outlier_free_equals_least_squares(self):
        g = synth_grid(4, 5, 1, 0.005, 0.02, 0.5, rng_seed=4)
        tls = TlsConfig.from_probability(0.9, 6)
        res = centralized_gnc_pgo(g, tls, odometry_init(g))
        assert all(w == 1.0 for w in res.weights.values())
        ls = solve_weighted_pgo(g, odometry_init(g))
        for n in g.nodes:
            assert np.abs(res.poses[n].trans - ls.poses[n].trans).max() < 1e-6

    def test_single_gross_outlier_rejected(self):
        g = synth_grid(4, 5, 1, 0.005, 0.02, 0.5, rng_seed=4)
        gi = inject_outliers(g, 0.05, rng_seed=1)  # adds exactly 1 outlier here
        outlier_idx = [k for k, e in enumerate(gi.edges) if e.truth is Truth.OUTLIER]
        assert len(outlier_idx) == 1
        tls = TlsConfig.from_probability(0.9, 6)
        res = centralized_gnc_pgo(gi, tls, odometry_init(gi))
        assert res.weights[outlier_idx[0]] == 0.0

    def test_heavy_outliers_close_to_inlier_only_solution(self):
        g = synth_grid(5, 8, 1, 0.005, 0.02, 0.4, rng_seed=10)
        gi = inject_outliers(g, 0.5, rng_seed=2)
        tls = TlsConfig.from_probability(0.9, 6)
        res = centralized_gnc_pgo(gi, tls, odometry_init(gi))
        # oracle: plain least squares on the true-inlier subgraph
        w_ml = np.array([1.0 if e.truth is Truth.INLIER else 0.0 for e in gi.edges])
        ml = solve_weighted_pgo(gi, odometry_init(gi), w_ml)
        rmse = np.sqrt(
            np.mean([np.sum((res.poses[n].trans - ml.poses[n].trans) ** 2) for n in gi.nodes])
        )
        assert rmse < 0.05

    def test_odometry_weights_untouched(self):
        g = synth_grid(4, 5, 1, 0.005, 0.02, 0.5, rng_seed=4)
        gi = inject_outliers(g, 0.3, rng_seed=1)
        tls = TlsConfig.from_probability(0.9, 6)
        res = centralized_gnc_pgo(gi, tls, odometry_init(gi))
        loop_keys = {k for k, e in enumerate(gi.edges) if e.is_loop}
        assert set(res.weights) == loop_keys
