import numpy as np
import pytest

from weakgmm import estimators as est
from weakgmm.bagging import BagConfig, bag_many
from weakgmm.lipschitz_lab import (
    FinitePrior, two_point_model, two_point_strength_prior, empirical_lipschitz, finite_prior_posterior_mean,
    gaussian_pairs, identification_strength, iv_sup_norm, local_pairs, random_finite_model, random_finite_prior,
    scale_invariance_check, straddle_pairs, sup_norm, theorem1_bound_check, two_point_gradient_norm,
)
from weakgmm.model import FiniteThetaModel, RngStream, draw_iv_many
from weakgmm.quasibayes import flat_prior, qb_mean
from weakgmm.montecarlo import generate_synthetic_designs

from conftest import make_design


@pytest.fixture
def weak_design():
    return generate_synthetic_designs(1, 5.0, 1, seed=21)[0]


class TestEmpiricalLipschitz:
    def test_constant(self, rng):
        s = gaussian_pairs(np.zeros(3), np.eye(3), rng)
        rep = empirical_lipschitz(lambda g: np.full(len(g), 4.0), s, 1000)
        assert rep.max_ratio == 0.0 and rep.pair_count == 1000

    def test_identity_on_intercept(self, unit_design, rng):
        def sampler(n):
            g = rng.standard_normal((n, 2))
            gp = g.copy()
            gp[:, 0] += rng.uniform(-1, 1, n)
            return g, gp

        rep = empirical_lipschitz(lambda g: g[:, 0], sampler, 1000, norm=iv_sup_norm(unit_design))
        assert 1 - 1e-6 <= rep.max_ratio <= 1.0

    def test_zero_distance_pairs_skipped(self):
        g = np.zeros((5, 2))
        rep = empirical_lipschitz(lambda x: x[:, 0], lambda n: (g, g), 5)
        assert rep.pair_count == 0 and rep.max_ratio == 0.0

    def test_iv_norm(self):
        d = make_design(bounds=(-3.0, 2.0))
        # sup over theta of |a - b theta| is attained at an endpoint
        np.testing.assert_allclose(iv_sup_norm(d)(np.array([[1.0, 1.0], [0.0, 2.0]])), [4.0, 6.0])

    def test_local_pairs_distance(self, rng):
        g, gp = local_pairs(gaussian_pairs(np.zeros(4), np.eye(4), rng), 1e-3, rng)(200)
        np.testing.assert_allclose(sup_norm(g - gp), 1e-3, rtol=1e-10)

    def test_tsls_straddle_divergence(self, weak_design, rng):
        d = weak_design
        span = d.theta_upper - d.theta_lower
        rep = empirical_lipschitz(lambda x: est.tsls(x, d), straddle_pairs(d, 1e-6, rng), 200, iv_sup_norm(d))
        assert rep.max_ratio >= 1e6 * span / 4

    def test_straddle_needs_k1(self, rng):
        with pytest.raises(ValueError):
            straddle_pairs(make_design(k=2), 1e-6, rng)

    def test_bagged_ratio_stable(self, weak_design):
        # common random numbers: one stream shared by every evaluation
        d = weak_design
        cfg = BagConfig(400)
        delta = lambda x: bag_many(est.tsls, x, d, cfg, [RngStream(0)] * len(x))
        norm = iv_sup_norm(d)
        ratios = [empirical_lipschitz(delta, straddle_pairs(d, h, np.random.default_rng(1)), 200, norm).max_ratio
                  for h in (1e-4, 1e-6)]
        raw = empirical_lipschitz(lambda x: est.tsls(x, d), straddle_pairs(d, 1e-6, np.random.default_rng(1)), 200, norm)
        assert ratios[1] < 10 * ratios[0] and raw.max_ratio > 1e3 * ratios[1]


class TestFinitePrior:
    def test_single_support(self, rng):
        m = FiniteThetaModel([0.0, 1.0, 2.0], 1, np.zeros(3), np.eye(3))
        p = FinitePrior(((2, (1.0, -1.0, 0.0), 1.0),))
        out = finite_prior_posterior_mean(rng.standard_normal((10, 3)), m, p)
        np.testing.assert_array_equal(out, 2.0)

    def test_indistinguishable(self, rng):
        out = finite_prior_posterior_mean(5 * rng.standard_normal((20, 2)), two_point_model(), two_point_strength_prior(0.0))
        np.testing.assert_array_equal(out, 0.5)

    def test_strength_limit(self):
        vals = [finite_prior_posterior_mean([0.0, 1.0], two_point_model(), two_point_strength_prior(C))[0]
                for C in (1.0, 5.0, 20.0, 50.0)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert vals[-1] <= 1e-6
        assert vals[0] == pytest.approx(1 / (1 + np.e))

    def test_validation(self):
        m = two_point_model()
        with pytest.raises(ValueError, match="m\\(theta_j\\)"):
            FinitePrior(((0, (1.0, 0.0), 1.0),)).validate(m)
        with pytest.raises(ValueError):
            FinitePrior(((0, (0.0, 1.0), 0.4),))

    def test_identification_strength(self):
        m = FiniteThetaModel([0.0, 1.0], 1, np.zeros(2), 2 * np.eye(2))
        assert identification_strength(m, two_point_strength_prior(3.0)) == pytest.approx(1.5, rel=1e-15)


class TestPosteriorMeanBound:
    def test_zero_means(self, rng):
        m = random_finite_model(rng, s=3, k=1)
        p = FinitePrior(((0, np.zeros(3), 0.5), (2, np.zeros(3), 0.5)))
        rep = theorem1_bound_check(m, p, 1.0, 1000, rng)
        assert rep.max_ratio == 0.0 and not rep.violated

    def test_two_point_small_c(self, rng):
        m, p = two_point_model(), two_point_strength_prior(0.5)
        rep = theorem1_bound_check(m, p, identification_strength(m, p), 100_000, rng)
        assert not rep.violated

    def test_c_sweep(self):
        m = two_point_model()
        out = []
        for C in (0.5, 1.0, 2.0, 4.0):
            p = two_point_strength_prior(C)
            rep = theorem1_bound_check(m, p, identification_strength(m, p), 20_000, np.random.default_rng(0))
            assert not rep.violated
            out.append(rep.max_ratio)
        assert all(b > a for a, b in zip(out, out[1:]))

    def test_rejects_small_w(self, rng):
        m, p = two_point_model(), two_point_strength_prior(2.0)
        with pytest.raises(ValueError):
            theorem1_bound_check(m, p, 1.0, 10, rng)

    def test_random_priors(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            m = random_finite_model(rng)
            p = random_finite_prior(m, rng)
            assert not theorem1_bound_check(m, p, identification_strength(m, p), 10_000, rng).violated


class TestTwoPointGradient:
    def test_matches_finite_difference(self, rng):
        from weakgmm.lipschitz_lab import two_point_qb

        g = rng.uniform(-3, 3, (50, 2))
        h = 1e-6
        fd = np.abs(two_point_qb(g + [h, 0]) - two_point_qb(g - [h, 0])) / (2 * h)
        fd += np.abs(two_point_qb(g + [0, h]) - two_point_qb(g - [0, h])) / (2 * h)
        np.testing.assert_allclose(two_point_gradient_norm(g[:, 0], g[:, 1]), fd, rtol=1e-5, atol=1e-9)

    def test_no_overflow(self):
        with np.errstate(over="raise"):
            assert two_point_gradient_norm(0.0, 100.0) == 0.0


class TestScaleInvariance:
    def test_tsls(self, weak_design):
        xi = draw_iv_many(weak_design, RngStream(2), 200)
        assert scale_invariance_check(lambda x: est.tsls(x, weak_design), xi, (0.5, 1.0, 2.0, 100.0), 1e-14)

    def test_finite_gmm_exact(self, rng):
        m = FiniteThetaModel(np.arange(3.0), 1, np.zeros(3), np.eye(3))
        assert scale_invariance_check(lambda g: est.finite_gmm(g, m).astype(float), rng.standard_normal((100, 3)),
                                      (0.5, 2.0, 100.0))

    def test_bagged_tsls_not_invariant(self, weak_design):
        d = weak_design
        x = np.array([[1.0, 1e-3]])
        delta = lambda y: bag_many(est.tsls, y, d, BagConfig(400), [RngStream(0)] * len(y))
        assert not scale_invariance_check(delta, x, (0.5, 2.0))

    def test_quasi_bayes_not_invariant(self, weak_design):
        d = weak_design
        x = draw_iv_many(d, RngStream(3), 1)
        p = flat_prior(d, 401)
        assert not scale_invariance_check(lambda y: qb_mean(y, d, p), x, (1.0, 3.0))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            scale_invariance_check(lambda x: x[:, 0], np.ones((1, 2)), (0.0,))
