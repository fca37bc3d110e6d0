"""Comparison methods: a direct regression policy and a kernel-weighted
inverse-propensity policy learner for the continuous price.

The regression baseline fits Y on price, squared price, and instrument
features by (ridge) least squares and prices by the quadratic argmax. It
ignores unmeasured confounding, so its price coefficients are systematically
biased when latent demand drivers move both price and revenue.

The inverse-propensity learner weights observed revenues by a Gaussian kernel
match between the logged price and the candidate policy's price, divided by a
generalized propensity score Q(p | x, g) estimated as a ratio of two product
kernel density estimates. The policy class is linear in the covariates with
clipping to the price range, optimized by a deterministic coordinate grid
search with local refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DataError
from .function_spaces import FeatureMap, ScalarFunction, make_feature_map
from .policy import LinearPolicy, extract_policy
from .simulator import Dataset

logger = logging.getLogger(__name__)

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Regression baseline
# ---------------------------------------------------------------------------


@dataclass
class RegressionFit:
    """Least-squares fit of Y on [phi(x) p, phi(x) p^2, psi(x, g)]."""

    beta1_reg: ScalarFunction
    beta2_reg: ScalarFunction
    beta_g_reg: ScalarFunction
    ridge: float

    # aliases so policy extraction treats this like any coefficient container
    @property
    def beta1(self) -> ScalarFunction:
        return self.beta1_reg

    @property
    def beta2(self) -> ScalarFunction:
        return self.beta2_reg


def fit_regression_baseline(dataset: Dataset, x_map: FeatureMap, xg_map: FeatureMap,
                            ridge: float = 0.0) -> RegressionFit:
    """Ridge least squares of Y on the price-interacted covariate design.

    With ridge=0 the solve is plain least squares (minimum-norm on
    rank-deficient designs); with ridge>0 the normal equations are solved with
    the ridge added.
    """
    if ridge < 0:
        raise ConfigError("ridge must be nonnegative")
    phi_x = x_map(dataset.x)
    phi_xg = xg_map(np.hstack([dataset.x, dataset.g[:, None]]))
    p = dataset.p
    design = np.hstack([phi_x * p[:, None], phi_x * (p**2)[:, None], phi_xg])
    if ridge == 0.0:
        coef, *_ = np.linalg.lstsq(design, dataset.y, rcond=None)
    else:
        n, k = design.shape
        gram = design.T @ design / n + ridge * np.eye(k)
        rhs = design.T @ dataset.y / n
        factor = cho_factor(gram, lower=True, check_finite=False)
        coef = cho_solve(factor, rhs, check_finite=False)
    d = x_map.n_features
    return RegressionFit(
        beta1_reg=ScalarFunction(x_map, coef[:d]),
        beta2_reg=ScalarFunction(x_map, coef[d:2 * d]),
        beta_g_reg=ScalarFunction(xg_map, coef[2 * d:]),
        ridge=float(ridge),
    )


def regression_policy(fit: RegressionFit, p1: float, p2: float):
    """Quadratic-argmax pricing policy from the regression coefficients."""
    return extract_policy(fit, p1, p2)


# ---------------------------------------------------------------------------
# Generalized propensity score
# ---------------------------------------------------------------------------


def silverman_bandwidths(points: np.ndarray) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidths for a product-Gaussian KDE."""
    points = np.asarray(points, dtype=float)
    n, d = points.shape
    sigma = points.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1e-8)
    return sigma * (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))


class GpsDensityRatio:
    """Q(p, x, g) = f(p, x, g) / f(x, g), both product-Gaussian KDEs.

    The two estimates share the (x, g) bandwidths, so integrating the ratio
    over p gives exactly one; the returned value is floored at q_floor.
    """

    def __init__(self, dataset: Dataset, bandwidths=None, q_floor: float | None = None):
        z = np.column_stack([dataset.p, dataset.x, dataset.g])
        self.z = z
        if bandwidths is None:
            bandwidths = silverman_bandwidths(z)
        self.bandwidths = np.asarray(bandwidths, dtype=float)
        if self.bandwidths.shape != (z.shape[1],) or not (self.bandwidths > 0).all():
            raise ConfigError("kde_bandwidths must be positive, one per (p, x, g) dimension")
        if q_floor is None:
            den = self._denominator(dataset.x, dataset.g)
            q_floor = 1e-3 * float(np.median(den))
        if not q_floor > 0:
            raise ConfigError("q_floor must be positive")
        self.q_floor = float(q_floor)
        self.floored_evaluations = 0

    def _log_kernel_sums(self, query: np.ndarray, dims) -> np.ndarray:
        """log mean over data of the product Gaussian kernel on `dims`.

        `query` is full-width (p, x..., g); both it and the stored data are
        sliced to `dims`.
        """
        dims = np.asarray(dims)
        z = self.z[:, dims]
        q = query[:, dims]
        h = self.bandwidths[dims]
        # (m, n) squared standardized distances accumulated dimension-wise
        d2 = np.zeros((q.shape[0], z.shape[0]))
        for j in range(z.shape[1]):
            diff = (q[:, j, None] - z[None, :, j]) / h[j]
            d2 += diff * diff
        log_norm = -np.log(_SQRT_2PI * h).sum()
        m = -0.5 * d2
        peak = m.max(axis=1, keepdims=True)
        out = peak[:, 0] + np.log(np.exp(m - peak).mean(axis=1)) + log_norm
        return out

    def _denominator(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        query = np.column_stack([
            np.zeros(np.atleast_1d(g).shape[0]), np.atleast_2d(x), np.atleast_1d(g),
        ])
        dims = list(range(1, self.z.shape[1]))
        return np.exp(self._log_kernel_sums(query, dims))

    def __call__(self, p, x, g) -> np.ndarray:
        p = np.atleast_1d(np.asarray(p, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.atleast_1d(np.asarray(g, dtype=float))
        query = np.column_stack([p, x, g])
        log_num = self._log_kernel_sums(query, list(range(self.z.shape[1])))
        log_den = self._log_kernel_sums(query, list(range(1, self.z.shape[1])))
        ratio = np.exp(log_num - log_den)
        floored = ratio < self.q_floor
        if floored.any():
            self.floored_evaluations += int(floored.sum())
            logger.info("propensity floor binding at %d of %d queries", int(floored.sum()), ratio.size)
        return np.maximum(ratio, self.q_floor)


@dataclass
class KernelIPSConfig:
    """Settings for the inverse-propensity policy learner."""

    h: float | None = None
    kde_bandwidths: tuple | None = None
    q_floor: float | None = None
    p1: float = 0.0
    p2: float = 10.0
    grid_points: int = 9
    passes: int = 4
    reg_features_d: int = 32
    reg_ridge: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.h is not None and not self.h > 0:
            raise ConfigError("policy kernel bandwidth h must be positive")
        if not self.p1 < self.p2:
            raise ConfigError("price range must satisfy p1 < p2")
        if self.grid_points < 3 or self.passes < 1:
            raise ConfigError("grid_points must be >= 3 and passes >= 1")


def estimate_gps(dataset: Dataset, config: KernelIPSConfig | None = None) -> GpsDensityRatio:
    """Kernel-density-ratio estimate of the price propensity Q(p | x, g)."""
    config = config or KernelIPSConfig()
    return GpsDensityRatio(dataset, bandwidths=config.kde_bandwidths, q_floor=config.q_floor)


# ---------------------------------------------------------------------------
# Kernel inverse-propensity policy learner
# ---------------------------------------------------------------------------


def ips_value(y: np.ndarray, logged_prices: np.ndarray, policy_prices: np.ndarray,
              qhat: np.ndarray, h: float) -> float:
    """Self-normalized kernel-weighted value estimate.

    sum_i Y_i K((P_i - pi(X_i))/h) / Q_i  divided by  sum_i K(.)/Q_i, with a
    Gaussian kernel. Returns -inf when every kernel weight underflows.
    """
    u = (logged_prices - policy_prices) / h
    w = np.exp(-0.5 * u * u) / (_SQRT_2PI * h) / qhat
    denom = w.sum()
    if not denom > 0:
        return -np.inf
    return float((y * w).sum() / denom)


def _seed_linear_policy(dataset: Dataset, config: KernelIPSConfig) -> tuple[np.ndarray, float]:
    """Least-squares linearization of the regression baseline's prices."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(2)]
    q = dataset.x.shape[1]
    xg = np.hstack([dataset.x, dataset.g[:, None]])
    x_map = make_feature_map(q, config.reg_features_d, "median", seeds[0], points=dataset.x)
    xg_map = make_feature_map(q + 1, config.reg_features_d, "median", seeds[1], points=xg)
    reg = fit_regression_baseline(dataset, x_map, xg_map, ridge=config.reg_ridge)
    prices = regression_policy(reg, config.p1, config.p2).price_for(dataset.x)
    design = np.hstack([dataset.x, np.ones((dataset.n, 1))])
    coef, *_ = np.linalg.lstsq(design, prices, rcond=None)
    return coef[:-1], float(coef[-1])


def fit_kernel_ips(dataset: Dataset, config: KernelIPSConfig | None = None) -> LinearPolicy:
    """Maximize the self-normalized inverse-propensity value over clipped
    linear policies by cyclic coordinate grid search with refinement.

    Deterministic given the dataset and config. Raises DataError when the
    kernel weights vanish for every candidate (bandwidth h too small).
    """
    config = config or KernelIPSConfig()
    gps = estimate_gps(dataset, config)
    qhat = gps(dataset.p, dataset.x, dataset.g)
    h = config.h
    if h is None:
        # Undersmoothed bandwidth for value estimation: the kernel-weighted
        # value has O(h^2) smoothing bias, so h must shrink faster than the
        # density-optimal n^{-1/5} rate; sd(P) * n^{-1/3} keeps nh -> inf.
        h = max(float(np.std(dataset.p)), 1e-8) * dataset.n ** (-1.0 / 3.0)

    w, b = _seed_linear_policy(dataset, config)
    x = dataset.x
    q = x.shape[1]

    def value(wv, bv) -> float:
        prices = np.clip(x @ wv + bv, config.p1, config.p2)
        return ips_value(dataset.y, dataset.p, prices, qhat, h)

    span_b = 0.5 * (config.p2 - config.p1)
    x_scale = np.maximum(x.std(axis=0), 1e-8)
    spans = np.concatenate([[span_b], span_b / x_scale])

    best = value(w, b)
    any_finite = np.isfinite(best)
    offsets = np.linspace(-1.0, 1.0, config.grid_points)
    for pass_idx in range(config.passes):
        shrink = 0.5**pass_idx
        for coord in range(q + 1):
            cur = b if coord == 0 else w[coord - 1]
            cands = cur + offsets * spans[coord] * shrink
            vals = []
            for c in cands:
                if coord == 0:
                    vals.append(value(w, c))
                else:
                    w_try = w.copy()
                    w_try[coord - 1] = c
                    vals.append(value(w_try, b))
            vals = np.asarray(vals)
            if np.isfinite(vals).any():
                any_finite = True
                k = int(np.nanargmax(np.where(np.isfinite(vals), vals, -np.inf)))
                if vals[k] > best:
                    best = vals[k]
                    if coord == 0:
                        b = float(cands[k])
                    else:
                        w[coord - 1] = cands[k]
    if not any_finite:
        raise DataError("all kernel weights vanished; policy kernel bandwidth h is too small")
    return LinearPolicy(w=w, b=b, p1=config.p1, p2=config.p2)
