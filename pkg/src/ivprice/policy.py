"""Pricing policies: extraction from fitted coefficients, evaluation, serialization.

A policy maps covariates to prices inside a fixed admissible range [p1, p2].
The quadratic-argmax kind prices at the maximizer of beta1(x) p + beta2(x) p^2:

    price(x) = clip(-beta1(x) / (2 * min(beta2(x), -floor)), p1, p2)

where the floor keeps the denominator strictly negative even when the fitted
curvature has the wrong sign; floored evaluations are counted so callers can
inspect how often the guard fired.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, DataError
from .function_spaces import FeatureMap, ScalarFunction

DEFAULT_CURVATURE_FLOOR = 1e-3


def _check_range(p1: float, p2: float) -> tuple[float, float]:
    p1, p2 = float(p1), float(p2)
    if not (p1 < p2):
        raise ConfigError(f"price range must satisfy p1 < p2, got {(p1, p2)}")
    return p1, p2


class PricingPolicy:
    """Base class; concrete kinds implement _raw_prices. Prices are always clipped."""

    kind = "abstract"

    def __init__(self, p1: float, p2: float):
        self.p1, self.p2 = _check_range(p1, p2)

    def price_for(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        prices = np.clip(self._raw_prices(x), self.p1, self.p2)
        return float(prices[0]) if single else prices

    def __call__(self, x):
        return self.price_for(x)

    def _raw_prices(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _payload(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p1": self.p1, "p2": self.p2, **self._payload()}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


class QuadraticArgmaxPolicy(PricingPolicy):
    """Argmax of a fitted quadratic revenue curve with a curvature floor."""

    kind = "quadratic-argmax"

    def __init__(self, beta1, beta2, p1: float, p2: float, floor: float = DEFAULT_CURVATURE_FLOOR):
        super().__init__(p1, p2)
        if not (floor > 0):
            raise ConfigError(f"curvature floor must be positive, got {floor!r}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.floor = float(floor)
        self.floored_evaluations = 0

    def _raw_prices(self, x: np.ndarray) -> np.ndarray:
        b1 = np.asarray(self.beta1(x), dtype=float)
        b2 = np.asarray(self.beta2(x), dtype=float)
        capped = np.minimum(b2, -self.floor)
        self.floored_evaluations += int((b2 > -self.floor).sum())
        return -b1 / (2.0 * capped)

    def _payload(self) -> dict:
        payload = {"floor": self.floor}
        for name in ("beta1", "beta2"):
            fn = getattr(self, name)
            if not isinstance(fn, ScalarFunction):
                raise ConfigError(
                    "only feature-linear quadratic policies serialize; "
                    f"{name} is {type(fn).__name__}"
                )
            payload[name] = {"map": fn.feature_map.to_dict(), "weights": fn.weights.tolist()}
        return payload


class ConstantPolicy(PricingPolicy):
    kind = "constant"

    def __init__(self, price: float, p1: float, p2: float):
        super().__init__(p1, p2)
        self.price = float(price)

    def _raw_prices(self, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.price)

    def _payload(self) -> dict:
        return {"price": self.price}


class LinearPolicy(PricingPolicy):
    """price(x) = clip(w'x + b, p1, p2)."""

    kind = "linear"

    def __init__(self, w, b: float, p1: float, p2: float):
        super().__init__(p1, p2)
        self.w = np.asarray(w, dtype=float).ravel()
        self.b = float(b)

    def _raw_prices(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.w.shape[0]:
            raise ConfigError(f"policy expects {self.w.shape[0]}-dim covariates, got {x.shape[1]}")
        return x @ self.w + self.b

    def _payload(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b}


class TabulatedPolicy(PricingPolicy):
    """Nearest-neighbor lookup over a finite price table."""

    kind = "tabulated"

    def __init__(self, xs, prices, p1: float, p2: float):
        super().__init__(p1, p2)
        self.xs = np.atleast_2d(np.asarray(xs, dtype=float))
        self.prices = np.asarray(prices, dtype=float).ravel()
        if self.xs.shape[0] != self.prices.shape[0] or self.xs.shape[0] == 0:
            raise ConfigError("tabulated policy needs aligned, nonempty xs and prices")

    def _raw_prices(self, x: np.ndarray) -> np.ndarray:
        d2 = ((x[:, None, :] - self.xs[None, :, :]) ** 2).sum(-1)
        return self.prices[np.argmin(d2, axis=1)]

    def _payload(self) -> dict:
        return {"xs": self.xs.tolist(), "prices": self.prices.tolist()}


def extract_policy(alpha, p1: float, p2: float, floor: float = DEFAULT_CURVATURE_FLOOR) -> QuadraticArgmaxPolicy:
    """Quadratic-argmax policy from a fitted nuisance container's beta1/beta2."""
    return QuadraticArgmaxPolicy(beta1=alpha.beta1, beta2=alpha.beta2, p1=p1, p2=p2, floor=floor)


def policy_from_dict(d: dict) -> PricingPolicy:
    """Rebuild a policy from its JSON dict form."""
    try:
        kind = d["kind"]
        p1, p2 = float(d["p1"]), float(d["p2"])
        if kind == "quadratic-argmax":
            fns = {}
            for name in ("beta1", "beta2"):
                spec = d[name]
                fns[name] = ScalarFunction(FeatureMap.from_dict(spec["map"]), spec["weights"])
            return QuadraticArgmaxPolicy(p1=p1, p2=p2, floor=float(d["floor"]), **fns)
        if kind == "constant":
            return ConstantPolicy(price=float(d["price"]), p1=p1, p2=p2)
        if kind == "linear":
            return LinearPolicy(w=d["w"], b=float(d["b"]), p1=p1, p2=p2)
        if kind == "tabulated":
            return TabulatedPolicy(xs=d["xs"], prices=d["prices"], p1=p1, p2=p2)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed policy payload: {exc}") from None
    raise DataError(f"unknown policy kind {kind!r}")


def load_policy(path) -> PricingPolicy:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read policy {path}: {exc}") from None
    return policy_from_dict(d)


def write_price_table(policy: PricingPolicy, xs, path) -> None:
    """CSV of prices on a covariate grid: x1,...,xq,price."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    prices = policy.price_for(xs)
    with open(path, "w") as fh:
        cols = [f"x{j + 1}" for j in range(xs.shape[1])] + ["price"]
        fh.write(",".join(cols) + "\n")
        for row, price in zip(xs, prices):
            fh.write(",".join(repr(float(v)) for v in row) + "," + repr(float(price)) + "\n")
