"""Pricing policies: argmax correctness, range clipping, serialization."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivprice import ConfigError, DataError
from ivprice.function_spaces import FeatureMap, ScalarFunction
from ivprice.minimax import FeatureLinearAlpha
from ivprice.policy import (
    ConstantPolicy,
    LinearPolicy,
    QuadraticArgmaxPolicy,
    TabulatedPolicy,
    extract_policy,
    load_policy,
    policy_from_dict,
    write_price_table,
)


def grid_argmax(b1, b2, p1, p2, step=1e-5):
    """Brute-force maximizer of b1*p + b2*p^2 over a fine grid."""
    grid = np.arange(p1, p2 + step, step)
    vals = b1 * grid + b2 * grid**2
    return grid[int(np.argmax(vals))]


class TestQuadraticArgmax:
    def test_matches_grid_search(self):
        beta1 = lambda x: 2.0 + x[:, 0]
        beta2 = lambda x: -(1.0 + x[:, 1] ** 2)
        pol = QuadraticArgmaxPolicy(beta1, beta2, p1=0.0, p2=10.0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 2))
        prices = pol.price_for(x)
        for xi, price in zip(x, prices):
            b1 = 2.0 + xi[0]
            b2 = -(1.0 + xi[1] ** 2)
            assert price == pytest.approx(grid_argmax(b1, b2, 0.0, 10.0), abs=1e-4)

    def test_interior_formula(self):
        pol = QuadraticArgmaxPolicy(lambda x: np.full(x.shape[0], 3.0),
                                    lambda x: np.full(x.shape[0], -1.5),
                                    p1=0.0, p2=10.0)
        assert pol.price_for(np.zeros(2)) == pytest.approx(1.0)

    def test_clipping(self):
        low = QuadraticArgmaxPolicy(lambda x: np.full(x.shape[0], -4.0),
                                    lambda x: np.full(x.shape[0], -1.0),
                                    p1=0.5, p2=2.0)
        assert low.price_for(np.zeros(2)) == 0.5  # unconstrained argmax is -2
        high = QuadraticArgmaxPolicy(lambda x: np.full(x.shape[0], 40.0),
                                     lambda x: np.full(x.shape[0], -1.0),
                                     p1=0.5, p2=2.0)
        assert high.price_for(np.zeros(2)) == 2.0  # unconstrained argmax is 20

    def test_curvature_floor_and_counter(self):
        # Wrong-sign curvature at half the points: the floor turns the
        # denominator into -2*floor and the counter records each firing.
        beta2 = lambda x: np.where(x[:, 0] > 0, 0.7, -2.0)
        pol = QuadraticArgmaxPolicy(lambda x: np.full(x.shape[0], 1.0), beta2,
                                    p1=0.0, p2=10.0, floor=1e-3)
        x = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]])
        prices = pol.price_for(x)
        # floored points: -1 / (2 * -1e-3) = 500 -> clipped to 10
        assert prices[0] == 10.0 and prices[2] == 10.0
        assert prices[1] == pytest.approx(0.25)
        assert pol.floored_evaluations == 2
        pol.price_for(x)
        assert pol.floored_evaluations == 4  # accumulates across calls

    def test_floor_validation(self):
        with pytest.raises(ConfigError):
            QuadraticArgmaxPolicy(lambda x: x[:, 0], lambda x: -x[:, 0],
                                  p1=0.0, p2=1.0, floor=0.0)

    def test_scalar_input_returns_float(self):
        pol = ConstantPolicy(1.5, p1=0.0, p2=10.0)
        out = pol.price_for(np.zeros(2))
        assert isinstance(out, float) and out == 1.5
        batch = pol.price_for(np.zeros((3, 2)))
        assert batch.shape == (3,)


class TestRangeValidation:
    @pytest.mark.parametrize("bad", [(1.0, 1.0), (2.0, 1.0)])
    def test_rejects_empty_range(self, bad):
        with pytest.raises(ConfigError):
            ConstantPolicy(1.0, p1=bad[0], p2=bad[1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_all_policy_kinds_stay_in_range(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = np.sort(rng.uniform(-5, 15, size=2))
    if p2 - p1 < 1e-6:
        p2 = p1 + 1.0
    policies = [
        ConstantPolicy(rng.uniform(-20, 30), p1, p2),
        LinearPolicy(rng.normal(size=2) * 5, rng.normal() * 5, p1, p2),
        TabulatedPolicy(rng.normal(size=(4, 2)), rng.uniform(-20, 30, size=4), p1, p2),
        QuadraticArgmaxPolicy(
            lambda x: np.sin(x[:, 0]) * 10,
            lambda x: np.cos(x[:, 1]),  # often wrong-sign: exercises the floor
            p1, p2,
        ),
    ]
    x = rng.normal(size=(20, 2)) * 3
    for pol in policies:
        prices = pol.price_for(x)
        assert np.all(prices >= p1) and np.all(prices <= p2)


class TestTabulated:
    def test_nearest_lookup(self):
        xs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        prices = np.array([1.0, 2.0, 3.0])
        pol = TabulatedPolicy(xs, prices, p1=0.0, p2=10.0)
        assert np.allclose(pol.price_for(xs), prices)
        assert pol.price_for(np.array([0.9, 0.1])) == 2.0
        assert pol.price_for(np.array([0.1, 0.8])) == 3.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            TabulatedPolicy(np.zeros((2, 2)), np.zeros(3), 0.0, 1.0)
        with pytest.raises(ConfigError):
            TabulatedPolicy(np.zeros((0, 2)), np.zeros(0), 0.0, 1.0)


class TestLinear:
    def test_formula(self):
        pol = LinearPolicy(w=[1.0, -2.0], b=0.5, p1=-100.0, p2=100.0)
        x = np.array([[1.0, 1.0], [2.0, 0.0]])
        assert np.allclose(pol.price_for(x), [-0.5, 2.5])

    def test_dimension_mismatch(self):
        pol = LinearPolicy(w=[1.0, -2.0], b=0.5, p1=0.0, p2=1.0)
        with pytest.raises(ConfigError):
            pol.price_for(np.zeros((3, 4)))


class TestSerialization:
    def _quadratic(self):
        fm = FeatureMap(2, 8, 1.0, seed=0)
        rng = np.random.default_rng(1)
        beta1 = ScalarFunction(fm, rng.normal(size=8))
        beta2 = ScalarFunction(fm, -np.abs(rng.normal(size=8)))
        return QuadraticArgmaxPolicy(beta1, beta2, p1=0.0, p2=10.0, floor=1e-3)

    @pytest.mark.parametrize("builder", [
        lambda self: ConstantPolicy(2.5, 0.0, 10.0),
        lambda self: LinearPolicy([0.3, -0.7], 1.2, 0.0, 10.0),
        lambda self: TabulatedPolicy([[0.0, 0.0], [1.0, 1.0]], [1.0, 2.0], 0.0, 10.0),
        lambda self: self._quadratic(),
    ])
    def test_round_trip(self, builder, tmp_path):
        pol = builder(self)
        back = policy_from_dict(pol.to_dict())
        x = np.random.default_rng(5).normal(size=(10, 2))
        assert np.allclose(back.price_for(x), pol.price_for(x))
        assert back.p1 == pol.p1 and back.p2 == pol.p2
        path = tmp_path / "policy.json"
        pol.to_json(path)
        from_file = load_policy(path)
        assert np.allclose(from_file.price_for(x), pol.price_for(x))
        assert json.loads(path.read_text())["kind"] == pol.kind

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            policy_from_dict({"kind": "mystery", "p1": 0.0, "p2": 1.0})

    def test_malformed_payload(self):
        with pytest.raises(DataError):
            policy_from_dict({"kind": "constant", "p1": 0.0, "p2": 1.0})  # no price
        with pytest.raises(DataError):
            policy_from_dict({"p1": 0.0, "p2": 1.0})  # no kind

    def test_callable_policies_do_not_serialize(self):
        pol = QuadraticArgmaxPolicy(lambda x: x[:, 0], lambda x: -np.ones(x.shape[0]),
                                    p1=0.0, p2=1.0)
        with pytest.raises(ConfigError):
            pol.to_dict()

    def test_load_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_policy(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(DataError):
            load_policy(bad)


class TestExtract:
    def test_uses_fitted_price_coefficients(self):
        x_map = FeatureMap(2, 8, 1.0, seed=2)
        xg_map = FeatureMap(3, 4, 1.0, seed=3)
        rng = np.random.default_rng(4)
        theta = rng.normal(size=(7, 8))
        alpha = FeatureLinearAlpha(x_map, xg_map, theta, np.zeros(4))
        pol = extract_policy(alpha, p1=0.0, p2=10.0, floor=1e-3)
        x = rng.normal(size=(25, 2))
        b1 = alpha.beta1(x)
        b2 = alpha.beta2(x)
        manual = np.clip(-b1 / (2 * np.minimum(b2, -1e-3)), 0.0, 10.0)
        assert np.allclose(pol.price_for(x), manual)


class TestPriceTable:
    def test_header_and_values(self, tmp_path):
        pol = LinearPolicy([1.0, 0.0], 0.0, p1=0.0, p2=10.0)
        xs = np.array([[0.5, 0.0], [1.5, 2.0], [20.0, -1.0]])
        path = tmp_path / "table.csv"
        write_price_table(pol, xs, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "x1,x2,price"
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 3
        assert [float(r[2]) for r in rows] == [0.5, 1.5, 10.0]
        assert [float(r[0]) for r in rows] == [0.5, 1.5, 20.0]
