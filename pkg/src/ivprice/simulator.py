"""Synthetic pricing environment with a latent-factor structural model.

Demand data are generated from

    Y = b_p1(U1, X) * P + b_p2(U1, X) * P^2 + b_g(U1, X, G) + b_ux(U1, U2, X) + eps_y
    P = a_g(U2, X, G) + a_ux(U2, X) + eps_p

where X is a 2-d customer covariate, G an observed auxiliary rate that shifts the
logged price but may also shift revenue directly, and (U1, U2) latent factors. The
coefficient functions are

    b_p1 = U1^2 - c1'X            b_p2 = -exp(U1 + c2'X)
    b_g  = (U1^2 + c3'X) G + c4 G b_ux = cos(U1 U2 + c5'X)
    a_g  = (U2^2 + c6'X) G + c7 G a_ux = cos(U2)

with (G, U1, U2) | X jointly normal with diagonal covariance and means linear in X,
and eps_y, eps_p independent Uniform[-w, w]. c4 scales the direct revenue effect of
G; c7 scales the strength of G as a price shifter.

The revenue-relevant aggregates have closed forms:

    beta1(x) = E[b_p1 | X=x] = -c1'x + (mu_u1 + c_u1'x)^2 + sigma2_u1
    beta2(x) = E[b_p2 | X=x] = -exp(mu_u1 + sigma2_u1 / 2 + (c2 + c_u1)'x)

so the pointwise optimal price is clip(-beta1 / (2 beta2), p1, p2) and exact policy
values/regrets are available by Monte Carlo over fresh X draws without outcome noise.

The random stream order inside ``generate_dataset`` (X block, then the (G, U1, U2)
normals, then eps_p, then eps_y) is part of the reproducibility contract: the same
(params, n, seed) yields byte-identical datasets.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError

CSV_HEADER = ("y", "x1", "x2", "g", "p")
CSV_HEADER_DIAGNOSTIC = CSV_HEADER + ("u1", "u2", "eps_y", "eps_p")


def _vec2(value, name: str) -> tuple[float, float]:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (2,):
        raise ConfigError(f"{name} must be a length-2 vector, got shape {arr.shape}")
    return (float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class SimParams:
    """Generator parameters. Defaults reproduce the benchmark configuration."""

    mu_x: tuple[float, float] = (0.25, 0.25)
    sigma_x: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    mu_g: float = 2.0
    mu_u1: float = 0.5
    mu_u2: float = 0.3
    c_g: tuple[float, float] = (0.25, 0.25)
    c_u1: tuple[float, float] = (0.3, 0.4)
    c_u2: tuple[float, float] = (0.2, 0.2)
    sigma2_g: float = 1.0
    sigma2_u1: float = 3.0
    sigma2_u2: float = 1.0
    c1: tuple[float, float] = (0.3, 0.2)
    c2: tuple[float, float] = (0.1, -0.3)
    c3: tuple[float, float] = (0.2, -0.1)
    c4: float = 1.0
    c5: tuple[float, float] = (0.4, 0.1)
    c6: tuple[float, float] = (1.2, 0.4)
    c7: float = 1.0
    price_range: tuple[float, float] = (0.0, 10.0)
    noise_half_width: float = 1.0

    def __post_init__(self):
        for name in ("mu_x", "c_g", "c_u1", "c_u2", "c1", "c2", "c3", "c5", "c6"):
            object.__setattr__(self, name, _vec2(getattr(self, name), name))
        sig = np.asarray(self.sigma_x, dtype=float)
        if sig.shape != (2, 2):
            raise ConfigError(f"sigma_x must be 2x2, got shape {sig.shape}")
        if not np.allclose(sig, sig.T, atol=1e-12):
            raise ConfigError("sigma_x must be symmetric")
        if np.linalg.eigvalsh(sig).min() <= 0:
            raise ConfigError("sigma_x must be positive definite")
        object.__setattr__(
            self, "sigma_x", ((float(sig[0, 0]), float(sig[0, 1])), (float(sig[1, 0]), float(sig[1, 1])))
        )
        for name in ("sigma2_g", "sigma2_u1", "sigma2_u2"):
            if float(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        p1, p2 = (float(self.price_range[0]), float(self.price_range[1]))
        if not (0.0 <= p1 < p2):
            raise ConfigError(f"price_range must satisfy 0 <= p1 < p2, got {(p1, p2)}")
        object.__setattr__(self, "price_range", (p1, p2))
        if float(self.noise_half_width) <= 0:
            raise ConfigError("noise_half_width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown simulator parameters: {sorted(extra)}")
        return cls(**d)

    def fingerprint(self, n: int, seed: int) -> str:
        payload = json.dumps(
            {"params": self.to_dict(), "n": n, "seed": seed}, sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Sample:
    """One logged interaction: outcome y, covariates x, rate g, price p."""

    y: float
    x: tuple[float, ...]
    g: float
    p: float


@dataclass(frozen=True)
class Dataset:
    """Immutable column store for logged data.

    ``hidden`` optionally carries generator internals (u1, u2, eps_y, eps_p) for
    diagnostics; estimators must consume only (y, x, g, p).
    """

    y: np.ndarray
    x: np.ndarray
    g: np.ndarray
    p: np.ndarray
    seed: int | None = None
    params_fingerprint: str | None = None
    hidden: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        g = np.asarray(self.g, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if x.ndim != 2:
            raise DataError(f"x must be 2-d, got shape {x.shape}")
        n = x.shape[0]
        if not (y.shape == g.shape == p.shape == (n,)):
            raise DataError("y, g, p must be aligned 1-d columns matching x rows")
        if n == 0:
            raise DataError("dataset must contain at least one row")
        for arr, name in ((y, "y"), (x, "x"), (g, "g"), (p, "p")):
            if not np.isfinite(arr).all():
                raise DataError(f"non-finite values in column {name}")
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "p", p)
        if self.hidden is not None:
            for arr in self.hidden.values():
                np.asarray(arr).setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(y=float(self.y[i]), x=tuple(self.x[i]), g=float(self.g[i]), p=float(self.p[i]))


def generate_dataset(params: SimParams, n: int, seed: int, keep_hidden: bool = False) -> Dataset:
    """Draw n i.i.d. samples from the structural model.

    Raises ConfigError if n is not positive. The draw order is fixed; see the
    module docstring.
    """
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    sig = np.asarray(params.sigma_x, dtype=float)
    chol = np.linalg.cholesky(sig)
    x = np.asarray(params.mu_x) + rng.standard_normal((n, 2)) @ chol.T
    z = rng.standard_normal((n, 3))
    g = params.mu_g + x @ np.asarray(params.c_g) + np.sqrt(params.sigma2_g) * z[:, 0]
    u1 = params.mu_u1 + x @ np.asarray(params.c_u1) + np.sqrt(params.sigma2_u1) * z[:, 1]
    u2 = params.mu_u2 + x @ np.asarray(params.c_u2) + np.sqrt(params.sigma2_u2) * z[:, 2]
    w = params.noise_half_width
    eps_p = rng.uniform(-w, w, size=n)
    eps_y = rng.uniform(-w, w, size=n)

    alpha_g = (u2**2 + x @ np.asarray(params.c6)) * g + params.c7 * g
    alpha_ux = np.cos(u2)
    p = alpha_g + alpha_ux + eps_p

    b_p1 = u1**2 - x @ np.asarray(params.c1)
    b_p2 = -np.exp(u1 + x @ np.asarray(params.c2))
    b_g = (u1**2 + x @ np.asarray(params.c3)) * g + params.c4 * g
    b_ux = np.cos(u1 * u2 + x @ np.asarray(params.c5))
    y = b_p1 * p + b_p2 * p**2 + b_g + b_ux + eps_y

    hidden = {"u1": u1, "u2": u2, "eps_y": eps_y, "eps_p": eps_p} if keep_hidden else None
    return Dataset(
        y=y, x=x, g=g, p=p, seed=seed, params_fingerprint=params.fingerprint(n, seed), hidden=hidden
    )


def oracle_beta(params: SimParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (beta1, beta2) at covariates x ((2,) or (m, 2))."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lin_u1 = params.mu_u1 + x @ np.asarray(params.c_u1)
    beta1 = -(x @ np.asarray(params.c1)) + lin_u1**2 + params.sigma2_u1
    beta2 = -np.exp(params.mu_u1 + params.sigma2_u1 / 2.0 + x @ (np.asarray(params.c2) + np.asarray(params.c_u1)))
    return beta1, beta2


def oracle_policy(params: SimParams, x) -> np.ndarray:
    """Pointwise revenue-optimal price clipped to the admissible range."""
    beta1, beta2 = oracle_beta(params, x)
    p1, p2 = params.price_range
    return np.clip(-beta1 / (2.0 * beta2), p1, p2)


def _policy_prices(policy, x: np.ndarray) -> np.ndarray:
    if hasattr(policy, "price_for"):
        prices = policy.price_for(x)
    else:
        prices = policy(x)
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (x.shape[0],):
        raise ConfigError(f"policy returned shape {prices.shape}, expected ({x.shape[0]},)")
    return prices


def policy_value(params: SimParams, policy, n_mc: int, seed: int) -> float:
    """Noise-free expected revenue of a policy over fresh covariate draws.

    ``policy`` is either a callable x -> prices or an object with ``price_for``.
    """
    if n_mc <= 0:
        raise ConfigError(f"n_mc must be positive, got {n_mc}")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.asarray(params.sigma_x, dtype=float))
    x = np.asarray(params.mu_x) + rng.standard_normal((n_mc, 2)) @ chol.T
    prices = _policy_prices(policy, x)
    beta1, beta2 = oracle_beta(params, x)
    return float(np.mean(beta1 * prices + beta2 * prices**2))


def regret(params: SimParams, policy, n_mc: int, seed: int,
           return_se: bool = False):
    """Value gap to the oracle policy on shared covariate draws (nonnegative).

    With ``return_se`` the Monte Carlo standard error of the gap estimate is
    returned alongside it.
    """
    if n_mc <= 0:
        raise ConfigError(f"n_mc must be positive, got {n_mc}")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.asarray(params.sigma_x, dtype=float))
    x = np.asarray(params.mu_x) + rng.standard_normal((n_mc, 2)) @ chol.T
    beta1, beta2 = oracle_beta(params, x)
    p_opt = np.clip(-beta1 / (2.0 * beta2), *params.price_range)
    p_hat = _policy_prices(policy, x)
    gaps = (beta1 * p_opt + beta2 * p_opt**2) - (beta1 * p_hat + beta2 * p_hat**2)
    estimate = float(np.mean(gaps))
    if not return_se:
        return estimate
    se = float(np.std(gaps, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return estimate, se


# ---------------------------------------------------------------------------
# CSV I/O. Floats are written with repr(), the shortest representation that
# round-trips IEEE-754 doubles exactly.
# ---------------------------------------------------------------------------


def write_csv(dataset: Dataset, path, diagnostics: bool = False) -> None:
    """Write a dataset to CSV. diagnostics=True appends hidden generator columns."""
    header = CSV_HEADER_DIAGNOSTIC if diagnostics else CSV_HEADER
    if diagnostics and not dataset.hidden:
        raise DataError("diagnostics output requires a dataset generated with keep_hidden=True")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        cols = [dataset.y, dataset.x[:, 0], dataset.x[:, 1], dataset.g, dataset.p]
        if diagnostics:
            cols += [dataset.hidden[k] for k in ("u1", "u2", "eps_y", "eps_p")]
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path) -> Dataset:
    """Read a dataset written by write_csv (diagnostic columns are preserved)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header not in (CSV_HEADER, CSV_HEADER_DIAGNOSTIC):
            raise DataError(f"{path}: unexpected header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    hidden = None
    if header == CSV_HEADER_DIAGNOSTIC:
        hidden = {"u1": data[:, 5], "u2": data[:, 6], "eps_y": data[:, 7], "eps_p": data[:, 8]}
    return Dataset(y=data[:, 0], x=data[:, 1:3], g=data[:, 3], p=data[:, 4], hidden=hidden)


def dataset_csv_bytes(dataset: Dataset, diagnostics: bool = False) -> bytes:
    """CSV serialization as bytes (used by reproducibility checks)."""
    buf = io.StringIO()
    header = CSV_HEADER_DIAGNOSTIC if diagnostics else CSV_HEADER
    if diagnostics and not dataset.hidden:
        raise DataError("diagnostics output requires a dataset generated with keep_hidden=True")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    cols = [dataset.y, dataset.x[:, 0], dataset.x[:, 1], dataset.g, dataset.p]
    if diagnostics:
        cols += [dataset.hidden[k] for k in ("u1", "u2", "eps_y", "eps_p")]
    for row in zip(*cols):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue().encode()
