"""Regression and kernel inverse-propensity baselines."""

import numpy as np
import pytest

from ivprice import ConfigError, DataError
from ivprice.baselines import (
    GpsDensityRatio,
    KernelIPSConfig,
    estimate_gps,
    fit_kernel_ips,
    fit_regression_baseline,
    ips_value,
    regression_policy,
    silverman_bandwidths,
)
from ivprice.function_spaces import make_feature_map
from ivprice.simulator import Dataset


def make_dataset(y, x, g, p):
    return Dataset(y=np.asarray(y, float), x=np.asarray(x, float),
                   g=np.asarray(g, float), p=np.asarray(p, float),
                   seed=0, params_fingerprint="synthetic")


def maps_for(ds, d=16, seed=0):
    xg = np.hstack([ds.x, ds.g[:, None]])
    x_map = make_feature_map(2, d, "median", seed, points=ds.x)
    xg_map = make_feature_map(3, d, "median", seed + 1, points=xg)
    return x_map, xg_map


@pytest.fixture(scope="module")
def unconfounded():
    """Price assigned independently of everything: regression is consistent."""
    rng = np.random.default_rng(0)
    n = 4000
    x = rng.normal(size=(n, 2))
    g = rng.normal(size=n)
    p = rng.uniform(0.0, 3.0, size=n)
    y = 3.0 * p - p**2 + 0.5 * x[:, 0] + 0.2 * g + 0.1 * rng.normal(size=n)
    return make_dataset(y, x, g, p)


class TestRegressionBaseline:
    def test_recovers_unconfounded_coefficients(self, unconfounded):
        ds = unconfounded
        x_map, xg_map = maps_for(ds)
        fit = fit_regression_baseline(ds, x_map, xg_map, ridge=1e-4)
        probe = ds.x[:200]
        b1 = fit.beta1_reg(probe)
        b2 = fit.beta2_reg(probe)
        assert abs(b1.mean() - 3.0) < 0.1
        assert abs(b2.mean() + 1.0) < 0.1
        pol = regression_policy(fit, 0.0, 10.0)
        prices = pol.price_for(probe)
        assert abs(prices.mean() - 1.5) < 0.1

    def test_reports_confounded_answer(self):
        # A latent u enters both price and revenue: p = 2 + u, and
        # y = 3p - p^2 + 4u. Substituting u = p - 2 shows the observational
        # regression must attribute slope 7 to price, not the causal 3.
        rng = np.random.default_rng(1)
        n = 4000
        x = rng.normal(size=(n, 2))
        g = rng.normal(size=n)
        u = rng.normal(size=n)
        p = 2.0 + u + 0.05 * rng.normal(size=n)
        y = 3.0 * p - p**2 + 4.0 * u + 0.05 * rng.normal(size=n)
        ds = make_dataset(y, x, g, p)
        x_map, xg_map = maps_for(ds)
        fit = fit_regression_baseline(ds, x_map, xg_map, ridge=1e-4)
        b1 = fit.beta1_reg(ds.x[:200]).mean()
        assert abs(b1 - 7.0) < 0.5
        assert abs(b1 - 3.0) > 3.0  # far from the causal coefficient

    def test_alias_properties(self, unconfounded):
        ds = unconfounded
        x_map, xg_map = maps_for(ds, d=4)
        fit = fit_regression_baseline(ds, x_map, xg_map)
        assert fit.beta1 is fit.beta1_reg
        assert fit.beta2 is fit.beta2_reg

    def test_ridge_validation(self, unconfounded):
        x_map, xg_map = maps_for(unconfounded, d=4)
        with pytest.raises(ConfigError):
            fit_regression_baseline(unconfounded, x_map, xg_map, ridge=-1.0)


class TestSilverman:
    def test_shape_and_positivity(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(100, 4))
        h = silverman_bandwidths(z)
        assert h.shape == (4,)
        assert (h > 0).all()
        z[:, 2] = 5.0  # constant column still gets a positive bandwidth
        assert (silverman_bandwidths(z) > 0).all()

    def test_scale_equivariance(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(200, 3))
        h = silverman_bandwidths(z)
        assert np.allclose(silverman_bandwidths(2.5 * z), 2.5 * h)


@pytest.fixture(scope="module")
def gaussian_price():
    # p | x, g ~ N(g, 1): a known conditional density to benchmark.
    rng = np.random.default_rng(2)
    n = 4000
    x = rng.normal(size=(n, 2))
    g = rng.normal(size=n)
    p = g + rng.normal(size=n)
    y = np.zeros(n)
    return make_dataset(y, x, g, p)


class TestGps:
    def test_ratio_integrates_to_one_over_price(self, gaussian_price):
        # Numerator and denominator share the (x, g) bandwidths, so the ratio
        # is a bona fide conditional density in p.
        gps = estimate_gps(gaussian_price)
        grid = np.linspace(-8, 8, 401)
        for xq, gq in [((0.0, 0.0), 0.0), ((0.5, -0.5), 1.0)]:
            x_rep = np.tile(xq, (grid.size, 1))
            g_rep = np.full(grid.size, gq)
            dens = gps(grid, x_rep, g_rep)
            integral = np.trapezoid(dens, grid)
            assert integral == pytest.approx(1.0, abs=0.02)

    def test_tracks_true_conditional_density(self, gaussian_price):
        gps = estimate_gps(gaussian_price)
        # At the center of the data the KDE ratio should approximate the
        # N(g, 1) density of p given g within kernel-smoothing error.
        for gq in (-1.0, 0.0, 1.0):
            p_query = np.array([gq])  # mode of the true conditional
            val = gps(p_query, np.zeros((1, 2)), np.array([gq]))[0]
            true = 1.0 / np.sqrt(2 * np.pi)
            assert abs(val - true) < 0.12

    def test_floor_binds_far_from_data(self, gaussian_price):
        gps = estimate_gps(gaussian_price)
        before = gps.floored_evaluations
        out = gps(np.array([500.0]), np.zeros((1, 2)), np.zeros(1))
        assert out[0] == gps.q_floor
        assert gps.floored_evaluations == before + 1

    def test_custom_floor_respected(self, gaussian_price):
        gps = GpsDensityRatio(gaussian_price, q_floor=0.2)
        vals = gps(np.array([0.0, 500.0]), np.zeros((2, 2)), np.zeros(2))
        assert (vals >= 0.2).all()

    def test_validation(self, gaussian_price):
        with pytest.raises(ConfigError):
            GpsDensityRatio(gaussian_price, bandwidths=np.ones(3))  # needs 4
        with pytest.raises(ConfigError):
            GpsDensityRatio(gaussian_price, bandwidths=-np.ones(4))
        with pytest.raises(ConfigError):
            GpsDensityRatio(gaussian_price, q_floor=0.0)


class TestIpsValue:
    def test_identity_recovers_mean_outcome(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=500) * 7 + 2
        prices = rng.uniform(0, 10, size=500)
        qhat = np.full(500, 0.37)
        val = ips_value(y, prices, prices.copy(), qhat, h=0.5)
        assert val == pytest.approx(y.mean(), abs=1e-12)

    def test_invariant_to_propensity_scale(self):
        rng = np.random.default_rng(4)
        y = rng.normal(size=300)
        logged = rng.uniform(0, 5, size=300)
        target = np.clip(logged + rng.normal(size=300) * 0.2, 0, 5)
        qhat = rng.uniform(0.5, 2.0, size=300)
        a = ips_value(y, logged, target, qhat, h=0.3)
        b = ips_value(y, logged, target, 10.0 * qhat, h=0.3)
        assert a == pytest.approx(b, rel=1e-12)

    def test_underflow_returns_neg_inf(self):
        y = np.ones(10)
        logged = np.zeros(10)
        target = np.full(10, 100.0)
        val = ips_value(y, logged, target, np.ones(10), h=1e-3)
        assert val == -np.inf


@pytest.fixture(scope="module")
def uniform_logging():
    # Uniform logging prices, revenue peaked at p = 2 for every unit.
    rng = np.random.default_rng(5)
    n = 2000
    x = rng.normal(size=(n, 2))
    g = rng.normal(size=n)
    p = rng.uniform(0.0, 6.0, size=n)
    y = 10.0 - (p - 2.0) ** 2 + 0.2 * rng.normal(size=n)
    return make_dataset(y, x, g, p)


class TestFitKernelIps:
    def test_finds_constant_optimum(self, uniform_logging):
        cfg = KernelIPSConfig(p1=0.0, p2=6.0)
        pol = fit_kernel_ips(uniform_logging, cfg)
        prices = pol.price_for(uniform_logging.x)
        # Kernel smoothing biases the located peak by O(h); half a unit is
        # generous relative to h ~ sd(P) n^{-1/3} ~ 0.14.
        assert abs(np.median(prices) - 2.0) < 0.5
        assert np.abs(prices - 2.0).mean() < 0.75

    def test_deterministic(self, uniform_logging):
        cfg = KernelIPSConfig(p1=0.0, p2=6.0)
        a = fit_kernel_ips(uniform_logging, cfg)
        b = fit_kernel_ips(uniform_logging, cfg)
        assert np.array_equal(a.w, b.w) and a.b == b.b

    def test_tiny_bandwidth_raises(self, uniform_logging):
        cfg = KernelIPSConfig(p1=0.0, p2=6.0, h=1e-12)
        with pytest.raises(DataError):
            fit_kernel_ips(uniform_logging, cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            KernelIPSConfig(h=-0.1)
        with pytest.raises(ConfigError):
            KernelIPSConfig(p1=2.0, p2=1.0)
        with pytest.raises(ConfigError):
            KernelIPSConfig(grid_points=2)
        with pytest.raises(ConfigError):
            KernelIPSConfig(passes=0)
