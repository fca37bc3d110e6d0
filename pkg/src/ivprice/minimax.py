"""Adversarial estimation of the nuisance vector from the moment restrictions.

The estimator solves

    min_alpha  sup_f  Psi_n(alpha, f) - ||f||^2_{anchor,n} - lambda ||f||^2_F
                     + mu ||alpha||^2_H

where Psi_n(alpha, f) = (1/n) sum_i W(Z_i; alpha)' f(X_i), the adversary f maps
x to R^8 over a random-feature space, and the weighted empirical norm is
||f||^2_{anchor,n} = (1/n) sum_i {f(X_i)' W(Z_i; anchor)}^2.

With f_k(x) = theta_k' phi(x), the inner problem is an exact quadratic in the
stacked weights theta in R^{8 D}:

    Psi_n = theta' a,        a = (1/n) sum_i W_i (x) phi(X_i)   (Kronecker stack)
    ||f||^2_{anchor,n} = theta' M theta,
        M = (1/n) sum_i v_i v_i',  v_i = W(Z_i; anchor) (x) phi(X_i)

so  f* has theta* = (1/2) (M + lambda I)^{-1} a  and the sup equals
(1/4) a' (M + lambda I)^{-1} a.

Two fitting drivers are provided: an alternating scheme (exact inner maximum,
then gradient descent on alpha with backtracking) and a one-step stochastic
gradient descent-ascent scheme on mini-batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DataError, NonFiniteObjective
from .function_spaces import FeatureMap, ScalarFunction, VectorAdversary, make_feature_map
from .moments import COMPONENT_ORDER, X_COMPONENTS, residual_matrix
from .simulator import Dataset

_H2_COLUMN = COMPONENT_ORDER.index("h2")


# ---------------------------------------------------------------------------
# Parameterized nuisances
# ---------------------------------------------------------------------------


class FeatureLinearAlpha:
    """Nuisance vector with every component linear in random features.

    ``theta`` is (7, D): rows follow X_COMPONENTS = (beta1, beta2, h1, h3, h4,
    h5, h6) over the covariate map; ``theta_h2`` is (Dg,) over the (x, g) map.
    Implements the same evaluation protocol as moments.NuisanceAlpha.
    """

    def __init__(self, x_map: FeatureMap, xg_map: FeatureMap, theta=None, theta_h2=None):
        self.x_map = x_map
        self.xg_map = xg_map
        self.theta = (
            np.zeros((len(X_COMPONENTS), x_map.n_features))
            if theta is None
            else np.asarray(theta, dtype=float).copy()
        )
        self.theta_h2 = (
            np.zeros(xg_map.n_features)
            if theta_h2 is None
            else np.asarray(theta_h2, dtype=float).copy()
        )
        if self.theta.shape != (len(X_COMPONENTS), x_map.n_features):
            raise ConfigError(f"theta must be (7, {x_map.n_features}), got {self.theta.shape}")
        if self.theta_h2.shape != (xg_map.n_features,):
            raise ConfigError(f"theta_h2 must be ({xg_map.n_features},), got {self.theta_h2.shape}")

    # -- component views -----------------------------------------------------

    def _x_component(self, name: str) -> ScalarFunction:
        return ScalarFunction(self.x_map, self.theta[X_COMPONENTS.index(name)])

    @property
    def beta1(self):
        return self._x_component("beta1")

    @property
    def beta2(self):
        return self._x_component("beta2")

    @property
    def h1(self):
        return self._x_component("h1")

    @property
    def h3(self):
        return self._x_component("h3")

    @property
    def h4(self):
        return self._x_component("h4")

    @property
    def h5(self):
        return self._x_component("h5")

    @property
    def h6(self):
        return self._x_component("h6")

    @property
    def h2(self):
        return ScalarFunction(self.xg_map, self.theta_h2)

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, x, g) -> np.ndarray:
        """(n, 8) component values, columns in COMPONENT_ORDER."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.atleast_1d(np.asarray(g, dtype=float))
        vals_x = self.x_map(x) @ self.theta.T
        h2 = self.xg_map(np.hstack([x, g[:, None]])) @ self.theta_h2
        return np.insert(vals_x, _H2_COLUMN, h2, axis=1)

    def norm2(self) -> float:
        return float((self.theta**2).sum() + (self.theta_h2**2).sum())

    def copy(self) -> "FeatureLinearAlpha":
        return FeatureLinearAlpha(self.x_map, self.xg_map, self.theta, self.theta_h2)

    # -- flat parameter vector --------------------------------------------------

    def pack(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.theta_h2])

    def unpack(self, vec: np.ndarray) -> None:
        d = self.theta.size
        self.theta = vec[:d].reshape(self.theta.shape).copy()
        self.theta_h2 = vec[d:].copy()

    def to_dict(self) -> dict:
        return {
            "x_map": self.x_map.to_dict(),
            "xg_map": self.xg_map.to_dict(),
            "theta": self.theta.tolist(),
            "theta_h2": self.theta_h2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLinearAlpha":
        return cls(
            FeatureMap.from_dict(d["x_map"]),
            FeatureMap.from_dict(d["xg_map"]),
            theta=d["theta"],
            theta_h2=d["theta_h2"],
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class MinimaxConfig:
    """Estimator settings. lambda_n/mu_n default to n^{-1/2} at fit time."""

    mode: str = "alternating"
    n_iters: int | None = None
    tol: float = 1e-6
    lambda_n: float | None = None
    mu_n: float | None = None
    batch_size: int = 256
    step_alpha: float = 0.05
    step_f: float = 0.05
    seed: int = 0
    anchor: str = "refresh"
    features_d: int = 300
    features_d_h2: int | None = None
    bandwidth: float | str = "median"
    init_ridge: float | None = None
    beta_ridge: float | None = None
    alpha_gd_steps: int = 200
    standardize: bool = True

    def __post_init__(self):
        if self.mode == "sgd":
            self.mode = "stochastic"
        if self.mode not in ("alternating", "stochastic"):
            raise ConfigError(
                f"mode must be 'alternating' or 'stochastic', got {self.mode!r}"
            )
        if self.anchor not in ("refresh", "fixed"):
            raise ConfigError(f"anchor must be 'refresh' or 'fixed', got {self.anchor!r}")
        if self.n_iters is not None and self.n_iters < 0:
            raise ConfigError("n_iters must be nonnegative")
        for name in ("tol", "step_alpha", "step_f"):
            if not (float(getattr(self, name)) > 0):
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_n", "mu_n", "init_ridge", "beta_ridge"):
            val = getattr(self, name)
            if val is not None and float(val) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size <= 0 or self.features_d <= 0 or self.alpha_gd_steps <= 0:
            raise ConfigError("batch_size, features_d, alpha_gd_steps must be positive")

    @property
    def iterations(self) -> int:
        if self.n_iters is not None:
            return self.n_iters
        return 50 if self.mode == "alternating" else 2000

    def to_dict(self) -> dict:
        """External JSON shape; optional knobs appear only when set."""
        d = {
            "lambda": self.lambda_n,
            "mu": self.mu_n,
            "K": self.n_iters,
            "tol": self.tol,
            "mode": self.mode,
            "batch_size": self.batch_size,
            "step_alpha": self.step_alpha,
            "step_f": self.step_f,
            "seed": self.seed,
            "anchor": self.anchor,
            "features": {"D": self.features_d, "bandwidth": self.bandwidth},
        }
        if self.features_d_h2 is not None:
            d["features"]["D_h2"] = self.features_d_h2
        if self.init_ridge is not None:
            d["init_ridge"] = self.init_ridge
        if self.beta_ridge is not None:
            d["beta_ridge"] = self.beta_ridge
        if self.alpha_gd_steps != 200:
            d["alpha_gd_steps"] = self.alpha_gd_steps
        if not self.standardize:
            d["standardize"] = self.standardize
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MinimaxConfig":
        if not isinstance(d, dict):
            raise ConfigError("estimator config must be a JSON object")
        scalar_keys = {
            "lambda": "lambda_n",
            "mu": "mu_n",
            "K": "n_iters",
            "tol": "tol",
            "mode": "mode",
            "batch_size": "batch_size",
            "step_alpha": "step_alpha",
            "step_f": "step_f",
            "seed": "seed",
            "anchor": "anchor",
            "init_ridge": "init_ridge",
            "beta_ridge": "beta_ridge",
            "alpha_gd_steps": "alpha_gd_steps",
            "standardize": "standardize",
        }
        extra = set(d) - set(scalar_keys) - {"features"}
        if extra:
            raise ConfigError(f"unknown estimator settings: {sorted(extra)}")
        kwargs = {field: d[key] for key, field in scalar_keys.items() if key in d}
        features = d.get("features")
        if features is not None:
            if not isinstance(features, dict):
                raise ConfigError("'features' must be an object")
            fextra = set(features) - {"D", "bandwidth", "D_h2"}
            if fextra:
                raise ConfigError(f"unknown feature settings: {sorted(fextra)}")
            if "D" in features:
                kwargs["features_d"] = features["D"]
            if "bandwidth" in features:
                kwargs["bandwidth"] = features["bandwidth"]
            if "D_h2" in features:
                kwargs["features_d_h2"] = features["D_h2"]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"malformed estimator config: {exc}") from None


def _resolve_penalties(config: MinimaxConfig, n: int) -> tuple[float, float]:
    lam = config.lambda_n if config.lambda_n is not None else n ** (-0.5)
    mu = config.mu_n if config.mu_n is not None else n ** (-0.5)
    return float(lam), float(mu)


# ---------------------------------------------------------------------------
# Internal standardization of the outcome and price scales
#
# y and g enter the residual algebra only as values, and p is never a feature
# input, so dividing y and p by their sample deviations commutes exactly with
# the moment structure: each nuisance component in scaled units is the raw
# component times a fixed power of the scales. Fitting in scaled units keeps
# the penalty terms commensurate with the adversary's detection power; the
# returned nuisances are mapped back to raw units.
# ---------------------------------------------------------------------------


def _scale_factors(dataset: Dataset) -> tuple[float, float]:
    sy = float(np.std(dataset.y))
    sp = float(np.std(dataset.p))
    return (sy if sy > 0 else 1.0, sp if sp > 0 else 1.0)


def _scaled_dataset(dataset: Dataset, sy: float, sp: float) -> Dataset:
    return Dataset(y=dataset.y / sy, x=dataset.x, g=dataset.g, p=dataset.p / sp)


def _component_scale_factors(sy: float, sp: float) -> tuple[np.ndarray, float]:
    """Multipliers taking raw-unit weights to scaled-unit weights.

    Rows follow X_COMPONENTS; the second value applies to theta_h2.
    """
    factors = {
        "beta1": sp / sy,
        "beta2": sp**2 / sy,
        "h1": 1.0,
        "h3": 1.0,
        "h4": 1.0 / (sp * sy),
        "h5": 1.0 / sp**2,
        "h6": 1.0 / sp**3,
    }
    return np.array([factors[name] for name in X_COMPONENTS]), 1.0 / sp


def _rescale_alpha(alpha: "FeatureLinearAlpha", sy: float, sp: float,
                   to_scaled: bool) -> "FeatureLinearAlpha":
    fac_x, fac_h2 = _component_scale_factors(sy, sp)
    if not to_scaled:
        fac_x, fac_h2 = 1.0 / fac_x, 1.0 / fac_h2
    return FeatureLinearAlpha(
        alpha.x_map, alpha.xg_map,
        theta=alpha.theta * fac_x[:, None],
        theta_h2=alpha.theta_h2 * fac_h2,
    )


def default_maps(dataset: Dataset, config: MinimaxConfig) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
    """Covariate, (covariate, g), and adversary feature maps derived from config.seed."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(3)]
    q = dataset.x.shape[1]
    d_h2 = config.features_d_h2 if config.features_d_h2 is not None else config.features_d
    xg = np.hstack([dataset.x, dataset.g[:, None]])
    x_map = make_feature_map(q, config.features_d, config.bandwidth, seeds[0], points=dataset.x)
    xg_map = make_feature_map(q + 1, d_h2, config.bandwidth, seeds[1], points=xg)
    adv_map = make_feature_map(q, config.features_d, config.bandwidth, seeds[2], points=dataset.x)
    return x_map, xg_map, adv_map


# ---------------------------------------------------------------------------
# Fit workspace: cached feature matrices and the exact gradient
# ---------------------------------------------------------------------------


class _Workspace:
    def __init__(self, dataset: Dataset, alpha: FeatureLinearAlpha, adv_map: FeatureMap):
        self.y = dataset.y
        self.g = dataset.g
        self.p = dataset.p
        self.n = dataset.n
        self.phi_x = alpha.x_map(dataset.x)
        self.phi_xg = alpha.xg_map(np.hstack([dataset.x, dataset.g[:, None]]))
        self.phi_adv = adv_map(dataset.x)
        self.adv_map = adv_map
        self.n_x_params = self.phi_x.shape[1] * len(X_COMPONENTS)

    def values(self, packed: np.ndarray) -> np.ndarray:
        d = self.n_x_params
        theta = packed[:d].reshape(len(X_COMPONENTS), -1)
        vals_x = self.phi_x @ theta.T
        h2 = self.phi_xg @ packed[d:]
        return np.insert(vals_x, _H2_COLUMN, h2, axis=1)

    def residuals(self, packed: np.ndarray, idx=None) -> np.ndarray:
        vals = self.values(packed)
        if idx is None:
            return residual_matrix(self.y, self.g, self.p, vals)
        return residual_matrix(self.y[idx], self.g[idx], self.p[idx], vals[idx])

    def psi(self, packed: np.ndarray, f_values: np.ndarray, idx=None) -> float:
        W = self.residuals(packed, idx)
        F = f_values if idx is None else f_values[idx]
        return float((W * F).sum() / W.shape[0])

    def grad_psi(self, packed: np.ndarray, f_values: np.ndarray, idx=None) -> np.ndarray:
        """Exact gradient of Psi wrt packed alpha parameters (no penalty term)."""
        if idx is None:
            y, g, p = self.y, self.g, self.p
            vals = self.values(packed)
            F = f_values
            phi_x, phi_xg = self.phi_x, self.phi_xg
        else:
            y, g, p = self.y[idx], self.g[idx], self.p[idx]
            vals = self.values(packed)[idx]
            F = f_values[idx]
            phi_x, phi_xg = self.phi_x[idx], self.phi_xg[idx]
        m = y.shape[0]
        b1, b2, h1, h2, h3, h4, h5, h6 = (vals[:, j] for j in range(8))
        e = g - h1
        r = p - h2
        s = h3 - h1**2
        common = y - p * b1 - p**2 * b2
        rho2 = e * r * p
        rho3 = rho2 * p
        level = h4 - h5 * b1 - h6 * b2

        t = {}
        t["beta1"] = -F[:, 6] * rho2 - F[:, 7] * (g * rho2 - s * h5)
        t["beta2"] = -F[:, 6] * rho3 - F[:, 7] * (g * rho3 - s * h6)
        t["h1"] = (
            -F[:, 0]
            - F[:, 6] * r * common
            + F[:, 7] * (-g * r * common + 2.0 * h1 * level)
        )
        t["h3"] = -F[:, 2] - F[:, 7] * level
        t["h4"] = -F[:, 3] - F[:, 7] * s
        t["h5"] = -F[:, 4] + F[:, 7] * s * b1
        t["h6"] = -F[:, 5] + F[:, 7] * s * b2
        t_h2 = (
            -F[:, 1]
            - F[:, 3] * y
            - F[:, 4] * p
            - F[:, 5] * p**2
            - F[:, 6] * e * common
            - F[:, 7] * g * e * common
        )
        grad_x = np.stack([phi_x.T @ t[name] for name in X_COMPONENTS]) / m
        grad_h2 = phi_xg.T @ t_h2 / m
        return np.concatenate([grad_x.ravel(), grad_h2])

    # -- inner maximization ------------------------------------------------------

    def inner_linear_term(self, W: np.ndarray, idx=None) -> np.ndarray:
        phi = self.phi_adv if idx is None else self.phi_adv[idx]
        return np.einsum("nk,nd->kd", W, phi).ravel() / W.shape[0]

    def inner_quad_apply(self, W_anchor: np.ndarray, theta_f: np.ndarray, idx=None) -> np.ndarray:
        """(M theta) without forming M: M = (1/n) sum v v', v = W (x) phi."""
        phi = self.phi_adv if idx is None else self.phi_adv[idx]
        D = phi.shape[1]
        T = theta_f.reshape(8, D)
        proj = ((phi @ T.T) * W_anchor).sum(1)
        back = np.einsum("nk,nd->kd", W_anchor * proj[:, None], phi)
        return back.ravel() / phi.shape[0]

    def inner_max(self, packed, anchor_packed, lam: float):
        """Closed-form inner maximizer and value at the current alpha."""
        W_cur = self.residuals(packed)
        W_anc = self.residuals(anchor_packed)
        phi = self.phi_adv
        n, D = phi.shape
        a = self.inner_linear_term(W_cur)
        V = (W_anc[:, :, None] * phi[:, None, :]).reshape(n, 8 * D)
        M = V.T @ V / n
        M[np.diag_indices_from(M)] += lam
        try:
            factor = cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NonFiniteObjective(f"inner quadratic is not positive definite: {exc}") from None
        theta_f = 0.5 * cho_solve(factor, a, check_finite=False)
        value = 0.5 * float(a @ theta_f)
        if not np.isfinite(value):
            raise NonFiniteObjective("inner maximization produced a non-finite value")
        adversary = VectorAdversary(self.adv_map, theta_f.reshape(8, D))
        f_values = phi @ adversary.weights.T
        return adversary, f_values, value


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def psi_n(dataset: Dataset, alpha, f) -> float:
    """Empirical pairing (1/n) sum_i W(Z_i; alpha)' f(X_i)."""
    vals = alpha.evaluate(dataset.x, dataset.g)
    W = residual_matrix(dataset.y, dataset.g, dataset.p, vals)
    F = np.asarray(f(dataset.x), dtype=float)
    return float((W * F).sum() / dataset.n)


def weighted_norm_n(dataset: Dataset, f, alpha_tilde) -> float:
    """||f||^2_{alpha_tilde, n} = (1/n) sum_i {f(X_i)' W(Z_i; alpha_tilde)}^2."""
    vals = alpha_tilde.evaluate(dataset.x, dataset.g)
    W = residual_matrix(dataset.y, dataset.g, dataset.p, vals)
    F = np.asarray(f(dataset.x), dtype=float)
    return float(((W * F).sum(1) ** 2).mean())


def inner_objective(dataset: Dataset, alpha, alpha_tilde, lam: float, f) -> float:
    """Psi_n(alpha, f) - ||f||^2_{alpha_tilde,n} - lam ||f||^2_F for any adversary."""
    return psi_n(dataset, alpha, f) - weighted_norm_n(dataset, f, alpha_tilde) - lam * f.norm2()


def inner_max(dataset: Dataset, alpha: FeatureLinearAlpha, alpha_tilde: FeatureLinearAlpha,
              lam: float, adv_map: FeatureMap):
    """Closed-form inner maximizer; returns (VectorAdversary, value)."""
    if not (lam > 0):
        raise ConfigError("lambda must be positive for the closed-form inner maximum")
    ws = _Workspace(dataset, alpha, adv_map)
    adversary, _, value = ws.inner_max(alpha.pack(), alpha_tilde.pack(), lam)
    return adversary, value


def objective(dataset: Dataset, alpha: FeatureLinearAlpha, alpha_tilde: FeatureLinearAlpha,
              config: MinimaxConfig, adv_map: FeatureMap | None = None) -> float:
    """Estimated objective: inner-max value plus the alpha penalty.

    When config.standardize is set (the default) the value is computed in the
    same internally standardized units the fit drivers use, so it is directly
    comparable with their objective traces.
    """
    if config.standardize:
        sy, sp = _scale_factors(dataset)
        dataset = _scaled_dataset(dataset, sy, sp)
        alpha = _rescale_alpha(alpha, sy, sp, to_scaled=True)
        alpha_tilde = _rescale_alpha(alpha_tilde, sy, sp, to_scaled=True)
    if adv_map is None:
        adv_map = default_maps(dataset, config)[2]
    lam, mu = _resolve_penalties(config, dataset.n)
    _, value = inner_max(dataset, alpha, alpha_tilde, lam, adv_map)
    return value + mu * alpha.norm2()


def grad_alpha(dataset: Dataset, alpha: FeatureLinearAlpha, f, mu: float = 0.0) -> np.ndarray:
    """Gradient of Psi_n(alpha, f) + mu ||alpha||^2 wrt the packed parameters."""
    adv_map = f.feature_map if isinstance(f, VectorAdversary) else alpha.x_map
    ws = _Workspace(dataset, alpha, adv_map)
    F = np.asarray(f(dataset.x), dtype=float)
    packed = alpha.pack()
    return ws.grad_psi(packed, F) + 2.0 * mu * packed


# ---------------------------------------------------------------------------
# Two-stage initializer
# ---------------------------------------------------------------------------


def _ridge_solve(phi: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge-regression weights for each target column: (n_targets, D)."""
    n, D = phi.shape
    targets = np.atleast_2d(targets.T).T  # (n, t)
    gram = phi.T @ phi / n
    rhs = phi.T @ targets / n
    if ridge == 0.0:
        sol, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
        return sol.T
    gram = gram + ridge * np.eye(D)
    factor = cho_factor(gram, lower=True, check_finite=False)
    return cho_solve(factor, rhs, check_finite=False).T


def _winsorize_columns(arr: np.ndarray, q: float = 0.01) -> np.ndarray:
    lo = np.quantile(arr, q, axis=0)
    hi = np.quantile(arr, 1.0 - q, axis=0)
    return np.clip(arr, lo, hi)


def init_two_stage(dataset: Dataset, x_map: FeatureMap, xg_map: FeatureMap,
                   ridge: float = 1e-3, beta_ridge: float | None = None) -> FeatureLinearAlpha:
    """Plug-in initializer: ridge regressions for the conditional means, then
    a pooled ridge solve for (beta1, beta2) smoothed onto the feature basis.

    The product targets (residual-outcome interactions) are winsorized at the
    1%/99% quantiles before regression — the outcome tails are heavy enough
    that raw least squares explodes. ``beta_ridge`` penalizes only the final
    price-coefficient solve (default: same as ``ridge``); a large value
    shrinks the fitted price coefficients toward zero without disturbing the
    conditional-mean stages. Deterministic given the maps.
    """
    if ridge < 0:
        raise ConfigError("ridge must be nonnegative")
    if beta_ridge is None:
        beta_ridge = ridge
    if beta_ridge < 0:
        raise ConfigError("beta_ridge must be nonnegative")
    y, g, p = dataset.y, dataset.g, dataset.p
    phi_x = x_map(dataset.x)
    phi_xg = xg_map(np.hstack([dataset.x, dataset.g[:, None]]))

    w_h2 = _ridge_solve(phi_xg, p, ridge)[0]
    r = p - phi_xg @ w_h2

    x_targets = np.column_stack([g, g**2])
    prod_x_targets = _winsorize_columns(np.column_stack([r * y, p * r, p**2 * r]))
    w_h1, w_h3 = _ridge_solve(phi_x, x_targets, ridge)
    w_h4, w_h5, w_h6 = _ridge_solve(phi_x, prod_x_targets, ridge)
    e = g - phi_x @ w_h1

    prod_targets = _winsorize_columns(np.column_stack([
        e * r * y, e * r * p, e * r * p**2,
        g * e * r * y, g * e * r * p, g * e * r * p**2,
        g * e,
    ]))
    w_prods = _ridge_solve(phi_x, prod_targets, ridge)
    fitted = phi_x @ w_prods.T  # columns: omega1..3, raw upsilon1..3, q
    h4v, h5v, h6v = phi_x @ w_h4, phi_x @ w_h5, phi_x @ w_h6
    omega = fitted[:, 0:3]
    qv = fitted[:, 6]
    upsilon = fitted[:, 3:6] - qv[:, None] * np.column_stack([h4v, h5v, h6v])

    # Pooled solve for the price-coefficient functions: both smoothed moment
    # identities omega1 = omega2 beta1 + omega3 beta2 and the corresponding
    # upsilon identity must hold at every observed covariate value. Solving
    # them jointly by ridge least squares pools information across points and
    # avoids the badly-cancelling pointwise 2x2 determinants.
    n, D = phi_x.shape
    design = np.vstack([
        np.hstack([omega[:, 1:2] * phi_x, omega[:, 2:3] * phi_x]),
        np.hstack([upsilon[:, 1:2] * phi_x, upsilon[:, 2:3] * phi_x]),
    ])
    rhs = np.concatenate([omega[:, 0], upsilon[:, 0]])
    gram = design.T @ design / (2 * n) + beta_ridge * np.eye(2 * D)
    lin = design.T @ rhs / (2 * n)
    if beta_ridge == 0.0:
        w_beta, *_ = np.linalg.lstsq(gram, lin, rcond=None)
    else:
        factor = cho_factor(gram, lower=True, check_finite=False)
        w_beta = cho_solve(factor, lin, check_finite=False)

    theta = np.zeros((len(X_COMPONENTS), x_map.n_features))
    theta[X_COMPONENTS.index("beta1")] = w_beta[:D]
    theta[X_COMPONENTS.index("beta2")] = w_beta[D:]
    theta[X_COMPONENTS.index("h1")] = w_h1
    theta[X_COMPONENTS.index("h3")] = w_h3
    theta[X_COMPONENTS.index("h4")] = w_h4
    theta[X_COMPONENTS.index("h5")] = w_h5
    theta[X_COMPONENTS.index("h6")] = w_h6

    return FeatureLinearAlpha(x_map, xg_map, theta=theta, theta_h2=w_h2)


# ---------------------------------------------------------------------------
# Fit drivers
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Outcome of a fit: final nuisances plus per-iteration diagnostics."""

    alpha: FeatureLinearAlpha
    objective_trace: list[float]
    inner_values: list[float]
    converged: bool
    iterations_used: int
    mode: str
    lambda_n: float
    mu_n: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.to_dict(),
            "objective_trace": [float(v) for v in self.objective_trace],
            "inner_values": [float(v) for v in self.inner_values],
            "converged": self.converged,
            "iterations_used": self.iterations_used,
            "mode": self.mode,
            "lambda_n": self.lambda_n,
            "mu_n": self.mu_n,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        try:
            return cls(
                alpha=FeatureLinearAlpha.from_dict(d["alpha"]),
                objective_trace=[float(v) for v in d["objective_trace"]],
                inner_values=[float(v) for v in d["inner_values"]],
                converged=bool(d["converged"]),
                iterations_used=int(d["iterations_used"]),
                mode=str(d["mode"]),
                lambda_n=float(d["lambda_n"]),
                mu_n=float(d["mu_n"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed fit result: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "FitResult":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read fit result {path}: {exc}") from None


def _gd_alpha_step(ws: _Workspace, packed: np.ndarray, F: np.ndarray, mu: float,
                   max_steps: int, tol: float, step0: float) -> np.ndarray:
    """Descend Psi_n(alpha, f) + mu ||alpha||^2 by backtracking gradient steps.

    The pairing is cubic in the parameters for a fixed adversary, so the
    subproblem is unbounded below; a trust region around the starting point
    keeps each outer update local and leaves the correction to the next
    adversary refresh.
    """

    def value(vec):
        return ws.psi(vec, F) + mu * float(vec @ vec)

    cur = packed.copy()
    val = value(cur)
    if not np.isfinite(val):
        raise NonFiniteObjective("alpha objective is non-finite at the current iterate")
    radius = max(1.0, 0.1 * float(np.linalg.norm(packed)))
    step = step0
    for _ in range(max_steps):
        grad = ws.grad_psi(cur, F) + 2.0 * mu * cur
        gnorm2 = float(grad @ grad)
        if np.sqrt(gnorm2) < tol * (1.0 + abs(val)):
            break
        accepted = False
        t = step
        for _ in range(40):
            cand = cur - t * grad
            cval = value(cand)
            if np.isfinite(cval) and cval <= val - 1e-4 * t * gnorm2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        cur, val = cand, cval
        if float(np.linalg.norm(cur - packed)) > radius:
            break
        step = min(t * 2.0, step0 * 16.0)
    if not np.isfinite(val):
        raise NonFiniteObjective("alpha descent produced a non-finite objective")
    return cur


def fit_alternating(dataset: Dataset, config: MinimaxConfig,
                    alpha_init: FeatureLinearAlpha | None = None) -> FitResult:
    """Alternate exact inner maximization with gradient descent on alpha.

    The anchor of the weighted norm is the current iterate when
    config.anchor == 'refresh', or the initializer when 'fixed'. The trace
    records the estimated objective at the start of each iteration plus a
    final entry at the returned alpha; convergence is declared when successive
    trace values differ by less than tol (relative).
    """
    if config.mode != "alternating":
        raise ConfigError("config.mode must be 'alternating' for fit_alternating")
    sy, sp = (1.0, 1.0)
    work_ds = dataset
    if config.standardize:
        sy, sp = _scale_factors(dataset)
        work_ds = _scaled_dataset(dataset, sy, sp)
    if alpha_init is None:
        x_map, xg_map, adv_map = default_maps(work_ds, config)
        ridge = config.init_ridge if config.init_ridge is not None else work_ds.n ** (-0.5)
        alpha_work = init_two_stage(work_ds, x_map, xg_map, ridge=ridge,
                                    beta_ridge=config.beta_ridge)
    else:
        adv_map = default_maps(work_ds, config)[2]
        alpha_work = (
            _rescale_alpha(alpha_init, sy, sp, to_scaled=True)
            if config.standardize
            else alpha_init.copy()
        )
    lam, mu = _resolve_penalties(config, dataset.n)
    if lam <= 0:
        raise ConfigError("alternating mode requires lambda_n > 0")

    ws = _Workspace(work_ds, alpha_work, adv_map)
    packed = alpha_work.pack()
    init_packed = packed.copy()

    trace: list[float] = []
    inner_vals: list[float] = []
    converged = False
    iterations_used = 0
    for _ in range(config.iterations):
        anchor = packed if config.anchor == "refresh" else init_packed
        _, F, inner_val = ws.inner_max(packed, anchor, lam)
        obj = inner_val + mu * float(packed @ packed)
        if not np.isfinite(obj):
            raise NonFiniteObjective("estimated objective is non-finite")
        inner_vals.append(inner_val)
        trace.append(obj)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) <= config.tol * max(1.0, abs(trace[-2])):
            converged = True
            break
        packed = _gd_alpha_step(
            ws, packed, F, mu, config.alpha_gd_steps, config.tol, config.step_alpha
        )
        iterations_used += 1

    if not converged:
        # the last descent step produced an iterate not yet logged
        anchor = packed if config.anchor == "refresh" else init_packed
        _, _, inner_val = ws.inner_max(packed, anchor, lam)
        inner_vals.append(inner_val)
        trace.append(inner_val + mu * float(packed @ packed))

    alpha_work.unpack(packed)
    alpha = (
        _rescale_alpha(alpha_work, sy, sp, to_scaled=False)
        if config.standardize
        else alpha_work
    )
    return FitResult(
        alpha=alpha,
        objective_trace=trace,
        inner_values=inner_vals,
        converged=converged,
        iterations_used=iterations_used,
        mode="alternating",
        lambda_n=lam,
        mu_n=mu,
    )


def fit_sgd(dataset: Dataset, config: MinimaxConfig,
            alpha_init: FeatureLinearAlpha | None = None) -> FitResult:
    """One-step stochastic gradient descent-ascent on mini-batches.

    Each iteration draws a batch, ascends the adversary weights on the batch
    game value (anchored at the current alpha), then descends alpha against
    the updated adversary. The trace records the post-update batch game value
    plus the alpha penalty; it is stochastic, unlike the alternating trace.
    """
    if config.mode != "stochastic":
        raise ConfigError("config.mode must be 'stochastic' for fit_sgd")
    sy, sp = (1.0, 1.0)
    work_ds = dataset
    if config.standardize:
        sy, sp = _scale_factors(dataset)
        work_ds = _scaled_dataset(dataset, sy, sp)
    if alpha_init is None:
        x_map, xg_map, adv_map = default_maps(work_ds, config)
        ridge = config.init_ridge if config.init_ridge is not None else work_ds.n ** (-0.5)
        alpha_work = init_two_stage(work_ds, x_map, xg_map, ridge=ridge,
                                    beta_ridge=config.beta_ridge)
    else:
        adv_map = default_maps(work_ds, config)[2]
        alpha_work = (
            _rescale_alpha(alpha_init, sy, sp, to_scaled=True)
            if config.standardize
            else alpha_init.copy()
        )
    lam, mu = _resolve_penalties(config, dataset.n)

    ws = _Workspace(work_ds, alpha_work, adv_map)
    packed = alpha_work.pack()
    D = ws.phi_adv.shape[1]
    theta_f = np.zeros(8 * D)
    rng = np.random.default_rng(config.seed)
    batch = min(config.batch_size, work_ds.n)

    trace: list[float] = []
    inner_vals: list[float] = []
    for _ in range(config.iterations):
        idx = rng.choice(work_ds.n, size=batch, replace=False)
        W_b = ws.residuals(packed, idx)
        a_b = ws.inner_linear_term(W_b, idx)
        grad_f = a_b - 2.0 * ws.inner_quad_apply(W_b, theta_f, idx) - 2.0 * lam * theta_f
        theta_f = theta_f + config.step_f * grad_f

        F_full = ws.phi_adv @ theta_f.reshape(8, D).T
        grad_a = ws.grad_psi(packed, F_full, idx) + 2.0 * mu * packed
        packed = packed - config.step_alpha * grad_a

        W_b = ws.residuals(packed, idx)
        proj = ((ws.phi_adv[idx] @ theta_f.reshape(8, D).T) * W_b).sum(1)
        psi_b = float(proj.mean())
        norm_b = float((proj**2).mean())
        game = psi_b - norm_b - lam * float(theta_f @ theta_f)
        inner_vals.append(game)
        trace.append(game + mu * float(packed @ packed))
        if not np.isfinite(trace[-1]):
            raise NonFiniteObjective("stochastic iterate produced a non-finite value")

    alpha_work.unpack(packed)
    alpha = (
        _rescale_alpha(alpha_work, sy, sp, to_scaled=False)
        if config.standardize
        else alpha_work
    )
    return FitResult(
        alpha=alpha,
        objective_trace=trace,
        inner_values=inner_vals,
        converged=False,
        iterations_used=config.iterations,
        mode="stochastic",
        lambda_n=lam,
        mu_n=mu,
    )


def fit(dataset: Dataset, config: MinimaxConfig,
        alpha_init: FeatureLinearAlpha | None = None) -> FitResult:
    """Dispatch on config.mode."""
    if config.mode == "alternating":
        return fit_alternating(dataset, config, alpha_init)
    return fit_sgd(dataset, config, alpha_init)
