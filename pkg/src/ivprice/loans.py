"""Loan-contract evaluation pipeline.

Turns loan records into prices via discounted payments, fits a penalized
logistic demand model by cross-validation, scores pricing policies by the
revenue the fitted demand implies, and produces partial-dependence curves.
A synthetic record generator exercises the full pipeline end to end; real
portfolio data is proprietary and no attempt is made to reproduce published
dollar figures, only relative orderings on synthetic data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError
from .minimax import MinimaxConfig
from .simulator import Dataset

__all__ = [
    "LoanRecord",
    "LoanTable",
    "DemandModel",
    "DemandEvaluation",
    "compute_price",
    "compute_prices",
    "fit_demand",
    "expected_revenue",
    "evaluate_on_demand",
    "partial_dependence",
    "loan_policy_dataset",
    "generate_loan_table",
    "read_loan_csv",
    "write_loan_csv",
    "DEFAULT_DEMAND_ALPHA",
    "DEFAULT_DEMAND_BETA",
    "DEFAULT_LOAN_FIT_CONFIG",
]

# Penalty floor for the logistic fit: with perfectly separable labels the
# unpenalized likelihood has no maximizer, so a minimum ridge keeps the
# solver finite.
PENALTY_FLOOR = 1e-6

# Estimator settings for fitting pricing policies on loan records. Loan
# prices and revenues have bounded tails and the contract outcome is a
# clean function of observables, so the two-stage initializer needs far
# less ridge shrinkage than the simulator's heavy-tailed draws; leaving
# the default n^{-1/2} ridges in place flattens the fitted revenue slope
# by nearly an order of magnitude.
DEFAULT_LOAN_FIT_CONFIG = MinimaxConfig(
    mode="alternating",
    n_iters=2,
    mu_n=1e-4,
    step_alpha=0.002,
    alpha_gd_steps=10,
    features_d=96,
    init_ridge=1e-3,
    beta_ridge=1e-4,
)

_BASE_FIELDS = ("monthly_payment", "term", "monthly_libor", "loan_amount",
                "apr", "contracted")


# ---------------------------------------------------------------------------
# Records and tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoanRecord:
    """One loan contract offer and its outcome."""

    monthly_payment: float
    term: int
    monthly_libor: float
    loan_amount: float
    apr: float = 0.0
    contracted: int = 0
    features: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "monthly_payment", float(self.monthly_payment))
        object.__setattr__(self, "term", int(self.term))
        object.__setattr__(self, "monthly_libor", float(self.monthly_libor))
        object.__setattr__(self, "loan_amount", float(self.loan_amount))
        object.__setattr__(self, "apr", float(self.apr))
        object.__setattr__(self, "contracted", int(self.contracted))
        object.__setattr__(self, "features",
                           tuple(float(v) for v in self.features))
        if self.term < 1:
            raise DataError(f"term must be >= 1 month, got {self.term}")
        if self.monthly_libor < 0 or self.apr < 0:
            raise DataError("rates must be nonnegative")
        if not self.loan_amount > 0:
            raise DataError(f"loan_amount must be positive, got {self.loan_amount}")
        if self.contracted not in (0, 1):
            raise DataError(f"contracted must be 0 or 1, got {self.contracted}")
        values = (self.monthly_payment, self.monthly_libor, self.loan_amount,
                  self.apr, *self.features)
        if not np.all(np.isfinite(values)):
            raise DataError("loan record contains non-finite values")


@dataclass
class LoanTable:
    """Columnar collection of loan records with named feature columns."""

    feature_names: tuple
    monthly_payment: np.ndarray
    term: np.ndarray
    monthly_libor: np.ndarray
    loan_amount: np.ndarray
    apr: np.ndarray
    contracted: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.feature_names = tuple(str(name) for name in self.feature_names)
        for name in ("monthly_payment", "monthly_libor", "loan_amount", "apr"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.term = np.asarray(self.term, dtype=int)
        self.contracted = np.asarray(self.contracted, dtype=int)
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        n = self.monthly_payment.shape[0]
        if n == 0:
            raise DataError("loan table is empty")
        if self.features.shape != (n, len(self.feature_names)):
            raise DataError(
                f"features must be (n, {len(self.feature_names)}), "
                f"got {self.features.shape}"
            )
        for name in ("term", "monthly_libor", "loan_amount", "apr", "contracted"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"column {name} must have length {n}")
        if np.any(self.term < 1):
            raise DataError("term must be >= 1 month")
        if np.any(self.monthly_libor < 0) or np.any(self.apr < 0):
            raise DataError("rates must be nonnegative")
        if np.any(self.loan_amount <= 0):
            raise DataError("loan_amount must be positive")
        if not np.isin(self.contracted, (0, 1)).all():
            raise DataError("contracted must be 0 or 1")
        numeric = (self.monthly_payment, self.monthly_libor, self.loan_amount,
                   self.apr, self.features)
        if not all(np.all(np.isfinite(a)) for a in numeric):
            raise DataError("loan table contains non-finite values")

    @property
    def n(self) -> int:
        return self.monthly_payment.shape[0]

    def record(self, i: int) -> LoanRecord:
        return LoanRecord(
            monthly_payment=self.monthly_payment[i],
            term=self.term[i],
            monthly_libor=self.monthly_libor[i],
            loan_amount=self.loan_amount[i],
            apr=self.apr[i],
            contracted=self.contracted[i],
            features=tuple(self.features[i]),
        )

    @classmethod
    def from_records(cls, records, feature_names) -> "LoanTable":
        records = list(records)
        return cls(
            feature_names=tuple(feature_names),
            monthly_payment=[r.monthly_payment for r in records],
            term=[r.term for r in records],
            monthly_libor=[r.monthly_libor for r in records],
            loan_amount=[r.loan_amount for r in records],
            apr=[r.apr for r in records],
            contracted=[r.contracted for r in records],
            features=np.array([r.features for r in records], dtype=float)
            if records else np.empty((0, len(tuple(feature_names)))),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LoanTable):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in (*_BASE_FIELDS, "features")
            )
        )


def read_loan_csv(path) -> LoanTable:
    """Parse a loan CSV with header monthly_payment,term,...,<features>."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise DataError(f"{path}: empty loan file") from None
        if header[: len(_BASE_FIELDS)] != _BASE_FIELDS:
            raise DataError(
                f"{path}: header must start with {','.join(_BASE_FIELDS)}, "
                f"got {header[:len(_BASE_FIELDS)]}"
            )
        feature_names = header[len(_BASE_FIELDS):]
        columns: list[list] = [[] for _ in header]
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                for j, value in enumerate(row):
                    columns[j].append(float(value))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
    base = dict(zip(_BASE_FIELDS, columns))
    features = np.array(columns[len(_BASE_FIELDS):], dtype=float).T
    if features.size == 0:
        features = np.empty((len(base["monthly_payment"]), 0))
    return LoanTable(feature_names=feature_names, features=features, **base)


def write_loan_csv(table: LoanTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*_BASE_FIELDS, *table.feature_names])
        for i in range(table.n):
            writer.writerow([
                repr(float(table.monthly_payment[i])),
                str(int(table.term[i])),
                repr(float(table.monthly_libor[i])),
                repr(float(table.loan_amount[i])),
                repr(float(table.apr[i])),
                str(int(table.contracted[i])),
                *(repr(float(v)) for v in table.features[i]),
            ])


# ---------------------------------------------------------------------------
# Price of a contract: discounted payment stream net of the amount financed
# ---------------------------------------------------------------------------


def compute_price(record: LoanRecord) -> float:
    """Net present value of the payment stream minus the loan amount.

    P = MP * sum_{tau=1..term} (1 + libor)^(-tau) - amount, evaluated with
    the closed-form annuity factor (term itself when the rate is zero).
    """
    if record.term < 1:
        raise DataError(f"term must be >= 1 month, got {record.term}")
    rate = record.monthly_libor
    if rate > 0:
        discount = (1.0 - (1.0 + rate) ** (-record.term)) / rate
    else:
        discount = float(record.term)
    return float(record.monthly_payment * discount - record.loan_amount)


def compute_prices(table: LoanTable) -> np.ndarray:
    """Vectorized compute_price over a table."""
    rate = table.monthly_libor
    discount = np.where(
        rate > 0,
        (1.0 - (1.0 + rate) ** (-table.term)) / np.where(rate > 0, rate, 1.0),
        table.term.astype(float),
    )
    return table.monthly_payment * discount - table.loan_amount


# ---------------------------------------------------------------------------
# Penalized logistic demand
# ---------------------------------------------------------------------------


@dataclass
class DemandModel:
    """Acceptance probability 1 / (1 + exp(-alpha'x - (beta'x) p)).

    Both coefficient vectors include the intercept slot first; ``x`` below
    is the feature vector with a prepended constant 1.
    """

    alpha_coef: np.ndarray
    beta_coef: np.ndarray
    l2_penalty: float

    def __post_init__(self):
        self.alpha_coef = np.asarray(self.alpha_coef, dtype=float).ravel()
        self.beta_coef = np.asarray(self.beta_coef, dtype=float).ravel()
        self.l2_penalty = float(self.l2_penalty)
        if self.alpha_coef.shape != self.beta_coef.shape:
            raise ConfigError("alpha_coef and beta_coef must have equal length")
        if not (np.all(np.isfinite(self.alpha_coef))
                and np.all(np.isfinite(self.beta_coef))
                and np.isfinite(self.l2_penalty)):
            raise ConfigError("demand model coefficients must be finite")

    def acceptance(self, x, p) -> np.ndarray:
        xt = _with_intercept(x, self.alpha_coef.size - 1)
        p = np.asarray(p, dtype=float)
        eta = xt @ self.alpha_coef + (xt @ self.beta_coef) * p
        return expit(eta)


def _with_intercept(x, d: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != d:
        raise ConfigError(f"expected {d} features, got {x.shape[1]}")
    return np.hstack([np.ones((x.shape[0], 1)), x])


def _log_loss(eta: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^eta) - y*eta, computed stably.
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def _fit_penalized_logistic(z: np.ndarray, y: np.ndarray, lam: float,
                            tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Newton's method with step halving on the ridge-penalized log-loss."""
    n, d = z.shape
    theta = np.zeros(d)
    eta = z @ theta

    def objective(eta_v, theta_v):
        return _log_loss(eta_v, y) + 0.5 * lam * float(theta_v @ theta_v)

    current = objective(eta, theta)
    for _ in range(max_iter):
        mu = expit(eta)
        grad = z.T @ (mu - y) / n + lam * theta
        if float(np.linalg.norm(grad)) < tol:
            break
        weights = np.maximum(mu * (1.0 - mu), 1e-12)
        hessian = (z * weights[:, None]).T @ z / n + lam * np.eye(d)
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            raise DataError("demand fit produced a singular Hessian") from None
        scale = 1.0
        for _ in range(40):
            candidate = theta - scale * step
            eta_c = z @ candidate
            value = objective(eta_c, candidate)
            if value <= current:
                theta, eta, current = candidate, eta_c, value
                break
            scale *= 0.5
        else:
            break
    return theta


def fit_demand(records: LoanTable, penalties, folds: int = 5,
               seed: int = 0) -> DemandModel:
    """Fit the logistic demand by Newton's method; pick the penalty by CV.

    The design is [x, x*p] with an intercept inside x, so the parameter is
    (alpha, beta) jointly. Fold assignment is a seeded permutation, making
    the selected penalty deterministic given the seed. Penalties below
    PENALTY_FLOOR are raised to it so separable labels cannot run away.
    """
    if folds < 2:
        raise ConfigError(f"folds must be >= 2, got {folds}")
    if records.n < folds:
        raise ConfigError(f"need at least {folds} records, got {records.n}")
    penalties = [float(p) for p in penalties]
    if not penalties:
        raise ConfigError("penalty grid is empty")
    if any(p < 0 for p in penalties):
        raise ConfigError("penalties must be nonnegative")
    penalties = sorted({max(p, PENALTY_FLOOR) for p in penalties})

    prices = compute_prices(records)
    xt = _with_intercept(records.features, records.features.shape[1])
    z = np.hstack([xt, xt * prices[:, None]])
    y = records.contracted.astype(float)

    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(records.n) % folds

    def cv_loss(lam: float) -> float:
        losses = []
        for k in range(folds):
            train, held = fold_of != k, fold_of == k
            theta = _fit_penalized_logistic(z[train], y[train], lam)
            losses.append(_log_loss(z[held] @ theta, y[held]))
        return float(np.mean(losses))

    best = min(penalties, key=lambda lam: (cv_loss(lam), lam))
    theta = _fit_penalized_logistic(z, y, best)
    d = xt.shape[1]
    return DemandModel(alpha_coef=theta[:d], beta_coef=theta[d:], l2_penalty=best)


def expected_revenue(model: DemandModel, x, p):
    """p times the acceptance probability at (x, p); zero price earns zero."""
    p = np.asarray(p, dtype=float)
    out = p * model.acceptance(x, p)
    return float(out[0]) if out.shape == (1,) else out


# ---------------------------------------------------------------------------
# Scoring policies against a fitted demand
# ---------------------------------------------------------------------------


@dataclass
class DemandEvaluation:
    """Per-record and mean revenues for a policy and two benchmarks.

    ``optimal`` is the per-record grid argmax of expected revenue, with the
    policy's and the recorded ("historical") prices included among the
    candidates so it dominates both columns by construction. ``historical``
    prices each record at its observed contract price.
    """

    policy_prices: np.ndarray
    policy: np.ndarray
    optimal: np.ndarray
    historical: np.ndarray

    @property
    def policy_revenue(self) -> float:
        return float(np.mean(self.policy))

    @property
    def optimal_revenue(self) -> float:
        return float(np.mean(self.optimal))

    @property
    def historical_revenue(self) -> float:
        return float(np.mean(self.historical))


def evaluate_on_demand(model: DemandModel, policy, records: LoanTable,
                       grid_points: int = 401) -> DemandEvaluation:
    """Score a policy by the revenue the fitted demand model implies.

    The policy consumes the table's standardized features (the same
    transform as loan_policy_dataset). The benchmark grid spans zero to
    just above the largest observed or policy price.
    """
    x_std, _, _ = _standardized_features(records)
    observed = compute_prices(records)
    policy_prices = np.asarray(policy.price_for(x_std), dtype=float)
    top = float(max(observed.max(), policy_prices.max(), 1.0)) * 1.25
    grid = np.linspace(0.0, top, grid_points)

    xt = _with_intercept(records.features, records.features.shape[1])
    a, b = xt @ model.alpha_coef, xt @ model.beta_coef
    eta = a[:, None] + b[:, None] * grid[None, :]
    grid_rev = grid[None, :] * expit(eta)
    policy_rev = policy_prices * expit(a + b * policy_prices)
    historical_rev = observed * expit(a + b * observed)
    optimal = np.maximum(grid_rev.max(axis=1),
                         np.maximum(policy_rev, historical_rev))
    return DemandEvaluation(
        policy_prices=policy_prices,
        policy=policy_rev,
        optimal=optimal,
        historical=historical_rev,
    )


def partial_dependence(policy, records, feature_index: int, grid) -> np.ndarray:
    """Average policy price as one standardized feature sweeps a grid.

    ``records`` may be a LoanTable (features are standardized the same way
    loan_policy_dataset standardizes them) or a ready feature matrix used
    as-is. The indexed column is replaced by each grid value in turn.
    """
    if isinstance(records, LoanTable):
        x, _, _ = _standardized_features(records)
    else:
        x = np.atleast_2d(np.asarray(records, dtype=float)).copy()
    if not 0 <= feature_index < x.shape[1]:
        raise ConfigError(
            f"feature_index must be in [0, {x.shape[1]}), got {feature_index}"
        )
    grid = np.asarray(grid, dtype=float).ravel()
    curve = np.empty(grid.size)
    for k, value in enumerate(grid):
        x[:, feature_index] = value
        curve[k] = float(np.mean(policy.price_for(x)))
    return curve


def _standardized_features(table: LoanTable):
    means = table.features.mean(axis=0)
    sds = table.features.std(axis=0)
    sds = np.where(sds > 0, sds, 1.0)
    return (table.features - means) / sds, means, sds


def loan_policy_dataset(table: LoanTable) -> Dataset:
    """Bundle a loan table for policy fitting.

    The outcome is realized revenue (price when contracted, zero
    otherwise), the treatment is the contract price, the instrument is the
    standardized APR, and the covariates are the standardized features.
    """
    prices = compute_prices(table)
    x_std, _, _ = _standardized_features(table)
    apr = table.apr
    spread = apr.std()
    g = (apr - apr.mean()) / (spread if spread > 0 else 1.0)
    y = table.contracted * prices
    return Dataset(y=y, x=x_std, g=g, p=prices)


# ---------------------------------------------------------------------------
# Synthetic records: documented marginals, an APR tied to the contract
# price through a latent competitor-rate confounder, and outcomes drawn
# from a planted logistic demand so recovery can be verified exactly.
# ---------------------------------------------------------------------------

_FEATURE_NAMES = ("fico", "term_scaled", "log_amount_scaled", "region",
                  "days_to_approval")

# Planted demand coefficients (intercept first). The price scale is a few
# hundred, so the price-slope coefficients are a couple of orders smaller.
# The intercept keeps acceptance moderate even at the top of the price
# range; that keeps the revenue curve p * acceptance(x, p) concave over the
# sampled prices (the logistic's convex far tail is never reached), so a
# quadratic revenue model is a sane local approximation.
DEFAULT_DEMAND_ALPHA = (3.0, 0.5, -0.25, 0.3, 0.15, -0.2)
DEFAULT_DEMAND_BETA = (-0.005, -0.0005, 0.0003, -0.0006, 0.0002, 0.0003)


def generate_loan_table(n: int, seed: int, alpha=None, beta=None) -> LoanTable:
    """Draw synthetic loan records exercising the full pipeline.

    Marginals: FICO-like score N(0,1); term uniform on {12,...,72} months;
    loan amount log-normal around 10k; LIBOR uniform on [0.001, 0.004];
    region uniform on five codes (centered/scaled); days-to-approval
    uniform on 1..14 (centered/scaled). A latent competitor-rate shock
    moves both the dealer's markup (hence the contract price) and the
    quoted APR, so APR is informative about price while the planted demand
    depends only on observed features and price. The monthly payment is
    backed out of the target price by the annuity identity, and
    ``contracted`` is a draw from the planted logistic demand.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    alpha = np.asarray(DEFAULT_DEMAND_ALPHA if alpha is None else alpha, float)
    beta = np.asarray(DEFAULT_DEMAND_BETA if beta is None else beta, float)
    if alpha.shape != (6,) or beta.shape != (6,):
        raise ConfigError("alpha and beta must have length 6 (intercept + 5)")
    rng = np.random.default_rng(seed)

    fico = rng.standard_normal(n)
    term = rng.choice(np.arange(12, 73, 12), size=n)
    log_amount = 9.2 + 0.5 * rng.standard_normal(n)
    amount = np.exp(log_amount)
    libor = rng.uniform(0.001, 0.004, size=n)
    region = rng.integers(0, 5, size=n)
    days = rng.integers(1, 15, size=n)

    features = np.column_stack([
        fico,
        (term - 42.0) / 20.0,
        (log_amount - 9.2) / 0.5,
        (region - 2.0) / 1.5,
        (days - 7.5) / 4.0,
    ])

    # A wide price spread relative to its mean keeps the constant and
    # price-interaction columns of the demand design well conditioned, so
    # planted coefficients are recoverable at realistic sample sizes.
    competitor = rng.standard_normal(n)
    price = (
        120.0
        + 60.0 * fico
        - 40.0 * features[:, 2]
        + 60.0 * competitor
        + 40.0 * rng.standard_normal(n)
    )
    price = np.maximum(price, 20.0)

    # Invert P = MP * annuity - amount for the payment.
    annuity = (1.0 - (1.0 + libor) ** (-term)) / libor
    monthly_payment = (price + amount) / annuity

    # APR: implied monthly rate solving the same annuity at the contract
    # payment, annualized, shifted by the competitor shock. A bisection on
    # the monotone annuity map keeps it exact.
    implied = np.array([
        _implied_monthly_rate(monthly_payment[i], term[i], amount[i])
        for i in range(n)
    ])
    apr = np.maximum(12.0 * implied + 0.002 * competitor + 0.01, 0.0)

    xt = np.hstack([np.ones((n, 1)), features])
    eta = xt @ alpha + (xt @ beta) * price
    accept_prob = expit(eta)
    contracted = (rng.uniform(size=n) < accept_prob).astype(int)

    return LoanTable(
        feature_names=_FEATURE_NAMES,
        monthly_payment=monthly_payment,
        term=term,
        monthly_libor=libor,
        loan_amount=amount,
        apr=apr,
        contracted=contracted,
        features=features,
    )


def _implied_monthly_rate(payment: float, term: int, amount: float) -> float:
    """Monthly rate at which the payment stream discounts to the amount."""
    # Present value of the stream decreases in the rate; bisect on it.
    def pv(rate: float) -> float:
        if rate <= 0:
            return payment * term
        return payment * (1.0 - (1.0 + rate) ** (-term)) / rate

    if pv(0.0) <= amount:
        return 0.0
    lo, hi = 0.0, 1.0
    while pv(hi) > amount:
        hi *= 2.0
        if hi > 1e6:  # pragma: no cover - unreachable for sane inputs
            raise DataError("implied rate diverged")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pv(mid) > amount:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
