import numpy as np
import pytest

from weakgmm import estimators as est
from weakgmm.estimators import CUE, LIML, EstimatorSpec, GridObjective, cue, estimate, finite_gmm, liml, plug_in, tsls
from weakgmm.functionals import ENDOG_CORR, IDENTITY, FunctionalSpec
from weakgmm.model import FiniteThetaModel, MomentDraw, RngStream, draw_iv_many, sigma_diag
from weakgmm.suite import golden_section, homoskedastic_design, tsls_objective_ld

from conftest import make_design, random_pd


def dense_argmin(design, kind, xi, n=1_000_001):
    grid = np.linspace(design.theta_lower, design.theta_upper, n)
    obj = GridObjective(design, kind, grid)
    return grid[np.argmin(obj.values(xi), axis=1)], grid[1] - grid[0]


class TestSpec:
    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            EstimatorSpec("gel")
        with pytest.raises(ValueError):
            EstimatorSpec(CUE, grid_points=2)
        with pytest.raises(ValueError):
            EstimatorSpec(CUE, tie_break="highest")

    def test_kind_mismatch(self, unit_design):
        with pytest.raises(ValueError):
            cue(MomentDraw([1.0], [1.0]), unit_design, EstimatorSpec(LIML))


class TestTsls:
    def test_zero_numerator(self, unit_design):
        assert tsls(MomentDraw([0.0], [1.0]), unit_design) == 0.0

    def test_upper_clip(self, unit_design):
        assert tsls(MomentDraw([100.0], [1.0]), unit_design) == 10.0

    def test_zero_denominator_gives_lower_bound(self, unit_design):
        assert tsls(MomentDraw([1.0], [0.0]), unit_design) == -10.0

    def test_batch_matches_single(self, rng):
        d = make_design(k=2, omega=random_pd(rng, 4))
        xi = draw_iv_many(d, RngStream(1), 50)
        batch = tsls(xi, d)
        np.testing.assert_array_equal(batch, [tsls(x, d) for x in xi])

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_golden_section_oracle(self, k):
        rng = np.random.default_rng(k)
        d = make_design(k=k, omega=random_pd(rng, 2 * k), qzz_inv=random_pd(rng, k), bounds=(-1e3, 1e3))
        xi = draw_iv_many(d, RngStream(k), 100)
        ref = golden_section(tsls_objective_ld(xi, d), np.full(100, -1e3), np.full(100, 1e3))
        np.testing.assert_allclose(tsls(xi, d), ref, rtol=0, atol=1e-8)

    def test_clipped(self, rng):
        d = make_design(pi=0.0, bounds=(-1.0, 1.0))
        th = tsls(draw_iv_many(d, RngStream(3), 1000), d)
        assert th.min() >= -1.0 and th.max() <= 1.0 and np.any(th == 1.0)


class TestCue:
    def test_interior_root(self, unit_design):
        assert cue(MomentDraw([1.0], [1.0]), unit_design) == pytest.approx(1.0, abs=1e-12)

    def test_k1_equals_tsls(self, rng):
        d = make_design(omega=random_pd(rng, 2), pi=0.5)
        xi = draw_iv_many(d, RngStream(4), 500)
        np.testing.assert_allclose(cue(xi, d), tsls(xi, d), atol=1e-10)

    @pytest.mark.parametrize("k", [1, 3])
    def test_homoskedastic_cue_equals_liml(self, k):
        d = homoskedastic_design(sigma_uv=0.4, k=k, pi_scale=0.5)
        xi = draw_iv_many(d, RngStream(5), 200)
        np.testing.assert_allclose(cue(xi, d), liml(xi, d), atol=1e-6)

    @pytest.mark.slow
    def test_dense_grid_oracle_k2(self, rng):
        d = make_design(k=2, omega=random_pd(rng, 4), pi=0.7)
        xi = draw_iv_many(d, RngStream(6), 5)
        ref, step = dense_argmin(d, CUE, xi)
        np.testing.assert_allclose(cue(xi, d), ref, atol=step)

    def test_output_in_bounds(self, rng):
        d = make_design(k=2, omega=random_pd(rng, 4), pi=0.0, bounds=(-2.0, 3.0))
        th = cue(draw_iv_many(d, RngStream(7), 300), d)
        assert th.min() >= -2.0 and th.max() <= 3.0

    def test_objective_matches_explicit_inverse(self, rng):
        d = make_design(k=3, omega=random_pd(rng, 6))
        xi = draw_iv_many(d, RngStream(8), 4)
        obj = est.grid_objective(d, CUE, 11)
        Q = obj.values(xi)
        for i, t in enumerate(obj.theta):
            g = xi[:, :3] - t * xi[:, 3:]
            S = sigma_diag(d, np.array([t]))[0]
            np.testing.assert_allclose(Q[:, i], np.einsum("na,ab,nb->n", g, np.linalg.inv(S), g), rtol=1e-10)

    def test_ties_go_to_lowest_theta(self):
        # pi = 0 and xi = 0 make Q identically zero
        d = make_design(bounds=(-3.0, 4.0))
        assert cue(MomentDraw([0.0], [0.0]), d) == -3.0
        assert liml(MomentDraw([0.0], [0.0]), d) == -3.0

    def test_singular_points_skipped(self, unit_design, monkeypatch):
        # a PD omega keeps Sigma(theta, theta) PD, so force a singular point
        real = est.sigma_diag

        def fake(design, theta):
            S = real(design, theta)
            S[np.asarray(theta) == 0.0] = 0.0
            return S

        monkeypatch.setattr(est, "sigma_diag", fake)
        obj = GridObjective(unit_design, CUE, np.linspace(-2, 2, 5))
        assert obj.skipped == 1
        Q = obj.values(np.array([[0.0, 1.0]]))
        assert Q[0, 2] == np.inf and np.all(np.isfinite(np.delete(Q[0], 2)))
        assert obj.minimize(np.array([[0.0, 1.0]]))[0] != 0.0


class TestLiml:
    def test_k1_equals_tsls(self, rng):
        d = make_design(omega=random_pd(rng, 2), su2=1.3, sv2=0.8, suv=0.2, pi=0.5)
        xi = draw_iv_many(d, RngStream(9), 500)
        th = tsls(xi, d)
        np.testing.assert_allclose(liml(xi, d), th, atol=1e-10)

    @pytest.mark.slow
    def test_dense_grid_oracle_hetero_k2(self, rng):
        d = make_design(k=2, omega=random_pd(rng, 4), su2=1.0, sv2=2.0, suv=0.5, pi=0.7)
        xi = draw_iv_many(d, RngStream(10), 5)
        ref, step = dense_argmin(d, LIML, xi)
        np.testing.assert_allclose(liml(xi, d), ref, atol=step)


class TestScaleInvariance:
    @pytest.mark.parametrize("fn", [tsls, cue, liml])
    def test_positive_scaling(self, fn, homo_design):
        xi = draw_iv_many(homo_design, RngStream(11), 30)
        ref = fn(xi, homo_design)
        for c in (0.5, 2.0, 100.0):
            np.testing.assert_allclose(fn(c * xi, homo_design), ref, rtol=0, atol=1e-10 * np.max(np.abs(ref)))

    def test_estimate_dispatch(self, unit_design):
        x = MomentDraw([0.3], [1.0])
        assert estimate(EstimatorSpec(est.TSLS), x, unit_design) == tsls(x, unit_design)
        with pytest.raises(ValueError):
            estimate(EstimatorSpec(est.FINITE_GMM), x, unit_design)


class TestFiniteGmm:
    def test_dominant(self):
        m = FiniteThetaModel([0.0, 1.0], 1, [0.0, 0.0], np.eye(2))
        assert finite_gmm([0.1, 5.0], m) == 0

    @pytest.mark.parametrize("c", [0.0, -2.0, 3.5])
    def test_tie(self, c):
        m = FiniteThetaModel([0.0, 1.0], 1, [0.0, 0.0], np.eye(2))
        assert finite_gmm([c, c], m) == 0

    def test_exhaustive(self, rng):
        W = [random_pd(rng, 2) for _ in range(5)]
        m = FiniteThetaModel(np.arange(5.0), 2, np.zeros(10), np.eye(10), weights=W)
        for g in rng.standard_normal((50, 10)):
            q = [g[2 * j:2 * j + 2] @ W[j] @ g[2 * j:2 * j + 2] for j in range(5)]
            assert finite_gmm(g, m) == int(np.argmin(q))

    def test_scale_invariant_exact(self, rng):
        m = FiniteThetaModel(np.arange(4.0), 1, np.zeros(4), np.eye(4))
        g = rng.standard_normal((100, 4))
        for c in (0.5, 2.0, 100.0):
            np.testing.assert_array_equal(finite_gmm(c * g, m), finite_gmm(g, m))


class TestPlugIn:
    def test_identity(self, unit_design):
        assert plug_in(2.0, FunctionalSpec(IDENTITY, unit_design)) == 2.0

    def test_endog_corr_at_ols_limit(self):
        d = make_design(suv=0.5, omega=np.array([[1.0, 0.5], [0.5, 1.0]]))
        assert plug_in(0.5, FunctionalSpec(ENDOG_CORR, d)) == pytest.approx(0.0, abs=1e-15)
        assert plug_in(0.0, FunctionalSpec(ENDOG_CORR, d)) == pytest.approx(0.5)
