"""Random Fourier feature spaces and capacity diagnostics.

A FeatureMap approximates a Gaussian kernel exp(-||x - x'||^2 / (2 b^2)):
frequencies are drawn N(0, b^{-2}) per coordinate, phases Uniform[0, 2pi), and

    phi_j(x) = sqrt(2 / D) * cos(w_j' x + b_j),  j = 1..D

so E[phi(x)' phi(x')] over the frequency draw equals the kernel. Features are
bounded by sqrt(2/D) elementwise and phi(x)' phi(x) <= 2.

Functions are linear in the features; the squared representation norm of
f(x) = theta' phi(x) is ||theta||^2. The module also provides the localized
Rademacher complexity bound

    R(delta) = sqrt(2 B / n) * sqrt(sum_j min(lambda_j, delta^2))

for an eigenvalue sequence lambda_j, and its critical radius, the root of
R(delta) = delta^2 on (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TAIL_REL_TOL = 1e-12
"""Eigenvalue series are truncated when a block adds less than this fraction."""


@dataclass
class FeatureMap:
    """Random cosine features with frozen frequencies and phases.

    Frequencies are a pure function of (input_dim, n_features, bandwidth, seed)
    and are regenerated from the seed on deserialization, never stored.
    """

    input_dim: int
    n_features: int
    bandwidth: float
    seed: int
    frequencies: np.ndarray = field(init=False, repr=False)
    phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.input_dim <= 0 or self.n_features <= 0:
            raise ConfigError("input_dim and n_features must be positive")
        if not (self.bandwidth > 0):
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth!r}")
        rng = np.random.default_rng(self.seed)
        self.frequencies = rng.standard_normal((self.n_features, self.input_dim)) / self.bandwidth
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=self.n_features)
        self.frequencies.setflags(write=False)
        self.phases.setflags(write=False)

    def __call__(self, x) -> np.ndarray:
        """Feature matrix (n, D) for inputs (n, input_dim); accepts a single point."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.input_dim:
            raise ConfigError(f"expected inputs of dimension {self.input_dim}, got {x.shape[1]}")
        phi = np.sqrt(2.0 / self.n_features) * np.cos(x @ self.frequencies.T + self.phases)
        return phi[0] if single else phi

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_features": self.n_features,
            "bandwidth": self.bandwidth,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        return cls(
            input_dim=int(d["input_dim"]),
            n_features=int(d["n_features"]),
            bandwidth=float(d["bandwidth"]),
            seed=int(d["seed"]),
        )


def median_bandwidth(points, seed: int = 0, max_points: int = 500) -> float:
    """Median pairwise distance on a subsample (the usual kernel-width heuristic)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < 2:
        raise ConfigError("median bandwidth needs at least two points")
    if n > max_points:
        idx = np.random.default_rng(seed).choice(n, size=max_points, replace=False)
        points = points[idx]
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    iu = np.triu_indices(points.shape[0], k=1)
    vals = dist[iu]
    vals = vals[vals > 0]
    if vals.size == 0:
        raise ConfigError("all subsampled points coincide; bandwidth undefined")
    return float(np.median(vals))


def make_feature_map(input_dim: int, n_features: int, bandwidth, seed: int, points=None) -> FeatureMap:
    """Build a FeatureMap; bandwidth='median' resolves the heuristic on ``points``."""
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise ConfigError(f"unknown bandwidth rule {bandwidth!r}")
        if points is None:
            raise ConfigError("bandwidth='median' requires data points")
        bandwidth = median_bandwidth(points, seed=seed)
    return FeatureMap(input_dim=input_dim, n_features=n_features, bandwidth=float(bandwidth), seed=seed)


class ScalarFunction:
    """f(x) = weights' phi(x) over a FeatureMap."""

    def __init__(self, feature_map: FeatureMap, weights):
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (feature_map.n_features,):
            raise ConfigError(
                f"weights shape {weights.shape} does not match D={feature_map.n_features}"
            )
        self.feature_map = feature_map
        self.weights = weights

    def __call__(self, x) -> np.ndarray:
        return self.feature_map(x) @ self.weights

    def norm2(self) -> float:
        return float(self.weights @ self.weights)


class VectorAdversary:
    """Eight scalar functions over a shared FeatureMap; f(x) in R^8."""

    N_OUTPUTS = 8

    def __init__(self, feature_map: FeatureMap, weights):
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.N_OUTPUTS, feature_map.n_features):
            raise ConfigError(f"adversary weights must be (8, D), got {weights.shape}")
        self.feature_map = feature_map
        self.weights = weights

    def __call__(self, x) -> np.ndarray:
        """(n, 8) adversary values."""
        return self.feature_map(x) @ self.weights.T

    def component(self, k: int) -> ScalarFunction:
        return ScalarFunction(self.feature_map, self.weights[k])

    def norm2(self) -> float:
        """Squared space norm: sum of component squared norms."""
        return float((self.weights**2).sum())

    @classmethod
    def zero(cls, feature_map: FeatureMap) -> "VectorAdversary":
        return cls(feature_map, np.zeros((cls.N_OUTPUTS, feature_map.n_features)))


# ---------------------------------------------------------------------------
# Capacity diagnostics
# ---------------------------------------------------------------------------


def _eval_block(eigenvalues, js: np.ndarray) -> np.ndarray:
    """Evaluate a callable spectrum on an index block, tolerating scalar-only callables."""
    try:
        vals = np.asarray(eigenvalues(js), dtype=float)
        if vals.shape == js.shape:
            return vals
    except (TypeError, ValueError):
        pass
    return np.asarray([float(eigenvalues(int(j))) for j in js])


_HARD_CAP = 1 << 24
"""Ceiling on enumerated terms for callable spectra (tail estimate covers the rest)."""


def _capped_sum(eigenvalues, delta2: float) -> float:
    """sum_j min(lambda_j, delta^2) over the spectrum.

    Arrays are summed exactly. For a callable j -> lambda_j (j = 1, 2, ...; also
    accepted: vectorized over an index array) the series is enumerated in
    geometric blocks and closed with a power-law tail estimate fitted to the
    last block; enumeration stops once successive tail estimates agree to
    TAIL_REL_TOL of the accumulated head, so the returned sum is effectively
    converged. Non-summable tails (local decay exponent <= 1 at the cap)
    raise ConfigError.
    """
    if not callable(eigenvalues):
        vals = np.asarray(eigenvalues, dtype=float)
        if vals.ndim != 1 or vals.size == 0:
            raise ConfigError("eigenvalues must be a nonempty 1-d sequence")
        if (vals < 0).any():
            raise ConfigError("eigenvalues must be nonnegative")
        if (np.diff(vals) > 1e-12 * max(1.0, float(vals[0]))).any():
            raise ConfigError("eigenvalue sequence must be nonincreasing")
        return float(np.minimum(vals, delta2).sum())

    total = 0.0
    start = 1
    block = 4096
    prev_last = None
    head_scale = None
    prev_full = None
    while True:
        js = np.arange(start, start + block)
        vals = _eval_block(eigenvalues, js)
        if (vals < 0).any():
            raise ConfigError("eigenvalues must be nonnegative")
        if head_scale is None:
            head_scale = max(1.0, float(vals[0]))
        seq = vals if prev_last is None else np.concatenate([[prev_last], vals])
        if (np.diff(seq) > 1e-12 * head_scale).any():
            raise ConfigError("eigenvalue sequence must be nonincreasing")
        total += float(np.minimum(vals, delta2).sum())
        last_j = start + block - 1
        lam_last = float(vals[-1])
        if lam_last == 0.0:
            return total
        # Close the series with an integral tail estimate from the local decay
        # exponent; valid once the delta^2 cap no longer binds. Enumeration
        # stops when the estimated full sum has stabilized to TAIL_REL_TOL.
        lam_first = float(vals[0])
        full = None
        if lam_last <= delta2 and 0 < lam_last < lam_first:
            s = np.log(lam_first / lam_last) / np.log(last_j / start)
            if s > 1.0 + 1e-9:
                full = total + lam_last * last_j / (s - 1.0)
        if full is not None and prev_full is not None:
            floor = TAIL_REL_TOL * max(full, np.finfo(float).tiny)
            if abs(full - prev_full) <= floor:
                return full
        if last_j + block >= _HARD_CAP:
            if full is None:
                raise ConfigError(
                    "eigenvalue tail does not appear summable within the enumeration cap"
                )
            return full
        prev_full = full
        prev_last = lam_last
        start += block
        block *= 2


def rademacher_bound(eigenvalues, B: float, n: int, delta: float) -> float:
    """Localized complexity bound sqrt(2B/n) * sqrt(sum_j min(lambda_j, delta^2)).

    ``eigenvalues`` is either a nonincreasing array or a callable j -> lambda_j
    describing an infinite spectrum (see _capped_sum for the truncation rule).
    """
    if B <= 0 or n <= 0:
        raise ConfigError("B and n must be positive")
    if not (delta > 0):
        raise ConfigError("delta must be positive")
    return float(np.sqrt(2.0 * B / n) * np.sqrt(_capped_sum(eigenvalues, delta * delta)))


def critical_radius(eigenvalues, B: float, n: int, tol: float = 1e-8) -> float:
    """Root of rademacher_bound(..., delta) = delta^2 on (0, 1] by bisection.

    The ratio R(delta)/delta^2 is strictly decreasing, so the root is unique.
    Raises ConfigError when there is no crossing in (0, 1] (e.g. all-zero
    eigenvalues, or n too small so that R(1) > 1).
    """
    lam1 = float(_eval_block(eigenvalues, np.arange(1, 2))[0]) if callable(eigenvalues) else float(
        np.asarray(eigenvalues, dtype=float)[0]
    )
    if lam1 <= 0:
        raise ConfigError("no crossing in (0, 1]: leading eigenvalue is zero")

    def gap(delta: float) -> float:
        return rademacher_bound(eigenvalues, B, n, delta) - delta * delta

    # For delta^2 <= lambda_1 the bound is at least sqrt(2B/n) * delta, so the
    # gap is provably positive at this starting point; no tiny-delta probe needed.
    lo = 0.5 * min(np.sqrt(lam1), np.sqrt(2.0 * B / n), 1.0)
    hi = 1.0
    if gap(hi) > 0:
        raise ConfigError("no crossing in (0, 1]: bound exceeds delta^2 at delta=1")
    if gap(lo) <= 0:
        # Root lies below the provable-positive point only if it is not in (0,1].
        while gap(lo) <= 0 and lo > 1e-9:
            lo *= 0.5
        if gap(lo) <= 0:
            raise ConfigError("no crossing in (0, 1]: bound vanishes near zero")
        hi = 2.0 * lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
