"""Data generator, analytic optimal policy, and regret evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivprice import (
    ConfigError,
    DataError,
    SimParams,
    generate_dataset,
    oracle_beta,
    oracle_policy,
    policy_value,
    read_csv,
    regret,
    write_csv,
)
from ivprice.policy import ConstantPolicy, LinearPolicy
from ivprice.simulator import CSV_HEADER, CSV_HEADER_DIAGNOSTIC, dataset_csv_bytes


def closed_form_coefficients(params: SimParams, x):
    """Independent derivation of the averaged revenue coefficients.

    Given x, the first latent is normal with mean mu_u1 + c_u1'x and
    variance sigma2_u1, so E[U1^2 | x] = mean^2 + var and
    E[exp(U1 + c2'x) | x] = exp(mean + var/2 + c2'x) (lognormal mean).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m1 = params.mu_u1 + x @ np.asarray(params.c_u1)
    b1 = -(x @ np.asarray(params.c1)) + m1**2 + params.sigma2_u1
    b2 = -np.exp(m1 + params.sigma2_u1 / 2.0 + x @ np.asarray(params.c2))
    return b1, b2


def quadratic_peak(b1, b2, p1, p2):
    return np.clip(-b1 / (2.0 * b2), p1, p2)


class TestGeneration:
    def test_reproducible_and_seed_sensitive(self):
        params = SimParams()
        a = generate_dataset(params, 50, seed=4)
        b = generate_dataset(params, 50, seed=4)
        c = generate_dataset(params, 50, seed=5)
        assert dataset_csv_bytes(a) == dataset_csv_bytes(b)
        assert dataset_csv_bytes(a) != dataset_csv_bytes(c)

    def test_requested_length_and_shapes(self):
        ds = generate_dataset(SimParams(), 37, seed=0)
        assert ds.n == 37
        assert ds.x.shape == (37, 2)
        assert ds.y.shape == ds.g.shape == ds.p.shape == (37,)
        assert np.isfinite(ds.y).all() and np.isfinite(ds.p).all()

    def test_covariate_marginal(self):
        ds = generate_dataset(SimParams(), 200_000, seed=1)
        assert np.allclose(ds.x.mean(0), [0.25, 0.25], atol=0.02)
        assert np.allclose(np.cov(ds.x.T), np.eye(2), atol=0.03)

    def test_structural_equations_from_latents(self):
        # With latents retained, the outcome and price must recompute exactly.
        params = SimParams()
        ds = generate_dataset(params, 500, seed=2, keep_hidden=True)
        u1, u2 = ds.hidden["u1"], ds.hidden["u2"]
        eps_y, eps_p = ds.hidden["eps_y"], ds.hidden["eps_p"]
        x, g, p, y = ds.x, ds.g, ds.p, ds.y
        c = {k: np.asarray(getattr(params, k)) for k in ("c1", "c2", "c3", "c5", "c6")}
        p_expect = (u2**2 + x @ c["c6"]) * g + params.c7 * g + np.cos(u2) + eps_p
        y_expect = (
            (u1**2 - x @ c["c1"]) * p
            - np.exp(u1 + x @ c["c2"]) * p**2
            + (u1**2 + x @ c["c3"]) * g
            + params.c4 * g
            + np.cos(u1 * u2 + x @ c["c5"])
            + eps_y
        )
        assert np.allclose(p, p_expect, rtol=0, atol=1e-12)
        assert np.allclose(y, y_expect, rtol=0, atol=1e-10)
        assert np.abs(eps_y).max() <= params.noise_half_width
        assert np.abs(eps_p).max() <= params.noise_half_width

    def test_hidden_absent_by_default(self):
        ds = generate_dataset(SimParams(), 5, seed=0)
        assert ds.hidden is None

    def test_validation(self):
        with pytest.raises((ConfigError, DataError)):
            generate_dataset(SimParams(), 0, seed=0)
        with pytest.raises(ConfigError):
            SimParams(price_range=(5.0, 1.0))
        with pytest.raises(ConfigError):
            SimParams(sigma2_u1=-1.0)
        with pytest.raises(ConfigError):
            SimParams(sigma_x=((1.0, 2.0), (2.0, 1.0)))  # not positive definite


class TestOracle:
    def test_coefficients_match_closed_form(self):
        params = SimParams(c4=5.0, c7=5.0)
        x = np.random.default_rng(0).normal(size=(40, 2))
        b1, b2 = oracle_beta(params, x)
        e1, e2 = closed_form_coefficients(params, x)
        assert np.allclose(b1, e1, rtol=1e-12)
        assert np.allclose(b2, e2, rtol=1e-12)

    def test_coefficients_match_monte_carlo(self):
        # Simulation oracle: average the structural coefficients over draws
        # of the latent at fixed x; the closed form must sit inside the
        # Monte Carlo confidence band.
        params = SimParams()
        rng = np.random.default_rng(7)
        for x in (np.zeros(2), np.array([0.4, -0.3]), np.array([-0.2, 0.1])):
            m1 = params.mu_u1 + x @ np.asarray(params.c_u1)
            u1 = rng.normal(m1, np.sqrt(params.sigma2_u1), size=2_000_000)
            draws1 = u1**2 - x @ np.asarray(params.c1)
            draws2 = -np.exp(u1 + x @ np.asarray(params.c2))
            b1, b2 = oracle_beta(params, x[None, :])
            for draws, target in ((draws1, b1[0]), (draws2, b2[0])):
                se = draws.std(ddof=1) / np.sqrt(draws.size)
                assert abs(draws.mean() - target) < 5 * se

    def test_policy_matches_grid_argmax(self):
        params = SimParams()
        p1, p2 = params.price_range
        x = np.random.default_rng(3).normal(0.25, 1.0, size=(20, 2))
        prices = oracle_policy(params, x)
        grid = np.arange(p1, p2 + 1e-4, 1e-4)
        b1, b2 = oracle_beta(params, x)
        for i in range(x.shape[0]):
            best = grid[np.argmax(b1[i] * grid + b2[i] * grid**2)]
            assert abs(prices[i] - best) <= 1e-4

    def test_price_at_origin(self):
        params = SimParams()
        price = oracle_policy(params, np.zeros((1, 2)))[0]
        b1, b2 = closed_form_coefficients(params, np.zeros((1, 2)))
        assert abs(price - quadratic_peak(b1[0], b2[0], 0.0, 10.0)) < 1e-12
        assert abs(price - 0.21991983525949563) < 1e-9

    def test_prices_respect_range(self):
        params = SimParams(price_range=(0.5, 2.0))
        x = np.random.default_rng(5).normal(size=(200, 2))
        prices = oracle_policy(params, x)
        assert (prices >= 0.5).all() and (prices <= 2.0).all()


class TestRegret:
    def test_oracle_policy_has_zero_regret(self):
        params = SimParams()

        class Oracle:
            def price_for(self, x):
                return oracle_policy(params, x)

        assert regret(params, Oracle(), n_mc=2000, seed=0) == pytest.approx(0.0, abs=1e-12)

    def test_regret_nonnegative_pointwise(self):
        # The optimum is a pointwise maximum over the same draws, so the
        # estimate is nonnegative for any policy, with no Monte Carlo slack.
        params = SimParams()
        for policy in (
            ConstantPolicy(0.0, 0.0, 10.0),
            ConstantPolicy(5.0, 0.0, 10.0),
            LinearPolicy([1.0, -2.0], 0.3, 0.0, 10.0),
        ):
            assert regret(params, policy, n_mc=500, seed=3) >= 0.0

    def test_constant_price_suboptimal(self):
        params = SimParams()
        r = regret(params, ConstantPolicy(9.0, 0.0, 10.0), n_mc=2000, seed=1)
        assert r > 1.0

    def test_standard_error_reporting(self):
        params = SimParams()
        policy = ConstantPolicy(1.0, 0.0, 10.0)
        est, se = regret(params, policy, n_mc=4000, seed=2, return_se=True)
        assert est == pytest.approx(regret(params, policy, n_mc=4000, seed=2))
        assert se > 0.0
        # Quadrupling the sample should roughly halve the standard error.
        _, se4 = regret(params, policy, n_mc=16000, seed=2, return_se=True)
        assert se4 < se

    def test_policy_value_consistent_with_regret(self):
        params = SimParams()
        policy = ConstantPolicy(2.0, 0.0, 10.0)

        class Oracle:
            def price_for(self, x):
                return oracle_policy(params, x)

        v_pol = policy_value(params, policy, n_mc=3000, seed=9)
        v_opt = policy_value(params, Oracle(), n_mc=3000, seed=9)
        r = regret(params, policy, n_mc=3000, seed=9)
        assert r == pytest.approx(v_opt - v_pol, abs=1e-9)


class TestCsv:
    def test_round_trip_identity(self, tmp_path):
        ds = generate_dataset(SimParams(), 64, seed=11)
        path = tmp_path / "data.csv"
        write_csv(ds, path)
        back = read_csv(path)
        assert np.array_equal(back.y, ds.y)
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.g, ds.g)
        assert np.array_equal(back.p, ds.p)
        assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)

    def test_diagnostic_columns(self, tmp_path):
        ds = generate_dataset(SimParams(), 16, seed=1, keep_hidden=True)
        path = tmp_path / "diag.csv"
        write_csv(ds, path, diagnostics=True)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(CSV_HEADER_DIAGNOSTIC)
        back = read_csv(path)
        assert np.array_equal(back.y, ds.y)

    def test_malformed_inputs(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError):
            read_csv(bad)
        short = tmp_path / "short.csv"
        short.write_text(",".join(CSV_HEADER) + "\n1.0,2.0\n")
        with pytest.raises(DataError):
            read_csv(short)
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        with pytest.raises(DataError):
            read_csv(empty)


@settings(max_examples=40, deadline=None)
@given(
    b1=st.floats(-30, 30),
    b2=st.floats(-5, 5),
    price=st.floats(0, 10),
)
def test_quadratic_peak_dominates_everywhere(b1, b2, price):
    # The clipped vertex of a concave quadratic beats any in-range price.
    if b2 >= -1e-6:
        b2 = -1.0
    peak = float(quadratic_peak(b1, b2, 0.0, 10.0))
    assert b1 * peak + b2 * peak**2 >= b1 * price + b2 * price**2 - 1e-9
