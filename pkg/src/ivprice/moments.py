"""Conditional moment restrictions for the pricing model.

Notation. With nuisances evaluated at a sample z = (y, x, g, p):

    h1 = E[G | X]            h2 = E[P | X, G]       h3 = E[G^2 | X]
    h4 = E[(P - h2) Y | X]   h5 = E[P (P - h2) | X] h6 = E[P^2 (P - h2) | X]

and revenue coefficients beta1(x), beta2(x), the product terms are

    rho1 = (G - h1)(P - h2) Y      rho4 = G * rho1
    rho2 = (G - h1)(P - h2) P      rho5 = G * rho2
    rho3 = (G - h1)(P - h2) P^2    rho6 = G * rho3

and the 8-dimensional residual W(z; alpha) is

    w1 = G - h1                  w5 = P (P - h2) - h5
    w2 = P - h2                  w6 = P^2 (P - h2) - h6
    w3 = G^2 - h3                w7 = rho1 - rho2 beta1 - rho3 beta2
    w4 = (P - h2) Y - h4         w8 = rho4 - s h4 - (rho5 - s h5) beta1
                                       - (rho6 - s h6) beta2,  s = h3 - h1^2

At the true nuisances E[W | X] = 0: w1..w6 by definition of conditional means,
w7/w8 because the two aggregated systems

    Omega1 = Omega2 beta1 + Omega3 beta2,   Omega_k = E[(G-h1)(P-h2) P^{k-1} Y-or-P | X]
    Upsilon1 = Upsilon2 beta1 + Upsilon3 beta2,
        Upsilon_k = Cov(G (G-h1), P^{k-1} (P-h2) {Y for k=1} | X)

identify (beta1, beta2) whenever the 2x2 determinant Omega2 Upsilon3 - Omega3 Upsilon2
is away from zero.

Exact expectations are evaluated by enumeration over a DiscreteSCM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discrete_scm import DiscreteSCM
from .errors import DegenerateSystem, InvalidModel, SingularWeighting
from .simulator import Sample

COMPONENT_ORDER = ("beta1", "beta2", "h1", "h2", "h3", "h4", "h5", "h6")
X_COMPONENTS = ("beta1", "beta2", "h1", "h3", "h4", "h5", "h6")


# ---------------------------------------------------------------------------
# Nuisance containers
# ---------------------------------------------------------------------------


class ConstantFunction:
    """Nuisance component that ignores its input."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.full(points.shape[0], self.value)

    def norm2(self) -> float:
        return 0.0


class TabulatedFunction:
    """Nuisance component defined by exact lookup on a finite support.

    Keys are tuples of the input coordinates; lookups use exact float equality,
    matching the DiscreteSCM grouping convention.
    """

    def __init__(self, table: dict):
        self.table = {tuple(float(v) for v in k): float(val) for k, val in table.items()}

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(points.shape[0])
        for i, row in enumerate(points):
            key = tuple(row)
            if key not in self.table:
                raise InvalidModel(f"point {key} is outside the tabulated support")
            out[i] = self.table[key]
        return out

    def norm2(self) -> float:
        return 0.0


@dataclass
class NuisanceAlpha:
    """Container for the eight nuisance components.

    beta1, beta2, h1, h3, h4, h5, h6 map covariates x; h2 maps (x, g). Any object
    with ``__call__(points) -> values`` and ``norm2()`` works as a component.
    """

    beta1: object
    beta2: object
    h1: object
    h2: object
    h3: object
    h4: object
    h5: object
    h6: object

    def evaluate(self, x, g) -> np.ndarray:
        """Component values at each sample, columns in COMPONENT_ORDER."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.atleast_1d(np.asarray(g, dtype=float))
        xg = np.hstack([x, g[:, None]])
        cols = []
        for name in COMPONENT_ORDER:
            fn = getattr(self, name)
            cols.append(fn(xg) if name == "h2" else fn(x))
        return np.column_stack(cols)

    def norm2(self) -> float:
        """Squared representation norm: sum over components."""
        return float(sum(getattr(self, name).norm2() for name in COMPONENT_ORDER))


# ---------------------------------------------------------------------------
# Residual formulas
# ---------------------------------------------------------------------------


def rho_terms(y, g, p, h1, h2) -> np.ndarray:
    """(…, 6) array of the product terms rho1..rho6."""
    y, g, p, h1, h2 = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (y, g, p, h1, h2))
    )
    er = (g - h1) * (p - h2)
    rho1 = er * y
    rho2 = er * p
    rho3 = rho2 * p
    return np.stack([rho1, rho2, rho3, g * rho1, g * rho2, g * rho3], axis=-1)


def residual_matrix(y, g, p, values: np.ndarray) -> np.ndarray:
    """(n, 8) residual matrix W given per-sample component values.

    ``values`` has columns in COMPONENT_ORDER.
    """
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    p = np.asarray(p, dtype=float)
    beta1, beta2, h1, h2, h3, h4, h5, h6 = (values[..., j] for j in range(8))
    w1 = g - h1
    w2 = p - h2
    w3 = g**2 - h3
    w4 = w2 * y - h4
    w5 = p * w2 - h5
    w6 = p**2 * w2 - h6
    er = w1 * w2
    rho1 = er * y
    rho2 = er * p
    rho3 = rho2 * p
    w7 = rho1 - rho2 * beta1 - rho3 * beta2
    s = h3 - h1**2
    w8 = g * rho1 - s * h4 - (g * rho2 - s * h5) * beta1 - (g * rho3 - s * h6) * beta2
    return np.stack([w1, w2, w3, w4, w5, w6, w7, w8], axis=-1)


def eval_rho(z: Sample, h1_val: float, h2_val: float) -> np.ndarray:
    """rho1..rho6 at a single sample given evaluated h1, h2."""
    return rho_terms(z.y, z.g, z.p, h1_val, h2_val).reshape(6)


def eval_W(z: Sample, alpha: NuisanceAlpha) -> np.ndarray:
    """The 8-vector W(z; alpha) at a single sample."""
    x = np.asarray(z.x, dtype=float)[None, :]
    values = alpha.evaluate(x, [z.g])
    return residual_matrix(np.asarray([z.y]), np.asarray([z.g]), np.asarray([z.p]), values)[0]


# ---------------------------------------------------------------------------
# Enumeration over a DiscreteSCM
# ---------------------------------------------------------------------------


class ConditionalLaw:
    """Exact conditional distribution of (Y, P, G, U) given X = x on a DiscreteSCM."""

    def __init__(self, scm: DiscreteSCM, x):
        self.scm = scm
        self.x = np.asarray(x, dtype=float)
        self.idx = scm.atoms_at(self.x)
        w = scm.prob[self.idx]
        self.w = w / w.sum()

    def mean(self, values) -> float:
        """Conditional expectation of a per-atom quantity."""
        return float(self.w @ np.asarray(values, dtype=float))

    def mean_given_g(self, values) -> dict[float, float]:
        """Conditional expectations within each (x, g) cell."""
        g = self.scm.g[self.idx]
        vals = np.asarray(values, dtype=float)
        out = {}
        for gv in np.unique(g):
            m = g == gv
            out[float(gv)] = float(self.w[m] @ vals[m] / self.w[m].sum())
        return out


def true_nuisances(scm: DiscreteSCM) -> NuisanceAlpha:
    """Exact nuisance functions of a DiscreteSCM, tabulated on its support."""
    tables = {name: {} for name in COMPONENT_ORDER}
    for xv in scm.x_support():
        law = ConditionalLaw(scm, xv)
        i = law.idx
        key = tuple(float(v) for v in xv)
        g, p, y = scm.g[i], scm.p[i], scm.y[i]
        h2_by_g = law.mean_given_g(p)
        h2 = np.asarray([h2_by_g[float(gv)] for gv in g])
        r = p - h2
        tables["h1"][key] = law.mean(g)
        tables["h3"][key] = law.mean(g**2)
        tables["h4"][key] = law.mean(r * y)
        tables["h5"][key] = law.mean(p * r)
        tables["h6"][key] = law.mean(p**2 * r)
        tables["beta1"][key] = law.mean(scm.beta_p1[i])
        tables["beta2"][key] = law.mean(scm.beta_p2[i])
        for gv, h2v in h2_by_g.items():
            tables["h2"][key + (gv,)] = h2v
    return NuisanceAlpha(**{name: TabulatedFunction(tables[name]) for name in COMPONENT_ORDER})


@dataclass(frozen=True)
class MomentSystem:
    """The two aggregated moment rows at a covariate value."""

    omega: tuple[float, float, float]
    upsilon: tuple[float, float, float]

    @property
    def determinant(self) -> float:
        return self.omega[1] * self.upsilon[2] - self.omega[2] * self.upsilon[1]


def moment_system(scm: DiscreteSCM, x) -> MomentSystem:
    """Exact (Omega, Upsilon) rows at x by enumeration."""
    law = ConditionalLaw(scm, x)
    i = law.idx
    g, p, y = scm.g[i], scm.p[i], scm.y[i]
    h1 = law.mean(g)
    h2_by_g = law.mean_given_g(p)
    h2 = np.asarray([h2_by_g[float(gv)] for gv in g])
    e = g - h1
    r = p - h2
    omega = (law.mean(e * r * y), law.mean(e * r * p), law.mean(e * r * p**2))
    q = law.mean(g * e)
    upsilon = (
        law.mean(g * e * r * y) - q * law.mean(r * y),
        law.mean(g * e * r * p) - q * law.mean(p * r),
        law.mean(g * e * r * p**2) - q * law.mean(p**2 * r),
    )
    return MomentSystem(omega=omega, upsilon=upsilon)


def identify_beta(system: MomentSystem, tol: float = 1e-10) -> tuple[float, float]:
    """Solve the 2x2 system for (beta1, beta2) by Cramer's rule.

    Raises DegenerateSystem when |determinant| <= tol (weak or irrelevant rate
    variable: both rows lose rank together).
    """
    o1, o2, o3 = system.omega
    u1, u2, u3 = system.upsilon
    det = system.determinant
    if abs(det) <= tol:
        raise DegenerateSystem(f"identification determinant {det!r} within tolerance {tol!r}")
    beta1 = (o1 * u3 - o3 * u1) / det
    beta2 = (o2 * u1 - o1 * u2) / det
    return (float(beta1), float(beta2))


def conditional_moment(scm: DiscreteSCM, alpha: NuisanceAlpha, x) -> np.ndarray:
    """m(x; alpha) = E[W(Z; alpha) | X = x] by enumeration."""
    law = ConditionalLaw(scm, x)
    i = law.idx
    values = alpha.evaluate(scm.x[i], scm.g[i])
    W = residual_matrix(scm.y[i], scm.g[i], scm.p[i], values)
    return law.w @ W


def sigma_alpha(scm: DiscreteSCM, alpha: NuisanceAlpha, x) -> np.ndarray:
    """Conditional second-moment matrix E[W W' | X = x] at alpha."""
    law = ConditionalLaw(scm, x)
    i = law.idx
    values = alpha.evaluate(scm.x[i], scm.g[i])
    W = residual_matrix(scm.y[i], scm.g[i], scm.p[i], values)
    return (W * law.w[:, None]).T @ W


def phi_objective(scm: DiscreteSCM, alpha: NuisanceAlpha, ridge: float = 1e-12) -> float:
    """Population objective Phi(alpha) = E[m' Sigma_0^{-1} m] over the x support.

    Sigma_0(x) is evaluated at the model's true nuisances; a ridge of
    ``ridge * max(1, tr/8)`` guards enumeration round-off. Raises SingularWeighting
    if Sigma_0(x) is singular beyond that guard.
    """
    alpha0 = true_nuisances(scm)
    total = 0.0
    for xv in scm.x_support():
        weight = scm.prob[scm.atoms_at(xv)].sum()
        m = conditional_moment(scm, alpha, xv)
        sig = sigma_alpha(scm, alpha0, xv)
        scale = max(1.0, np.trace(sig) / 8.0)
        eigvals = np.linalg.eigvalsh(sig)
        if eigvals.min() <= scale * 1e-10:
            raise SingularWeighting(
                f"Sigma(x) at x={tuple(float(v) for v in xv)} has eigenvalue "
                f"{eigvals.min():.3g}; conditional moments are degenerate"
            )
        solved = np.linalg.solve(sig + ridge * scale * np.eye(8), m)
        total += weight * float(m @ solved)
    return total
