"""Finite-support structural models for exact enumeration checks.

A DiscreteSCM places probability mass on finitely many atoms
(x, u1, u2, g, eps_p, eps_y) and tabulates the six coefficient functions on that
support. Prices and outcomes are then deterministic per atom:

    p = alpha_g + alpha_ux + eps_p
    y = beta_p1 * p + beta_p2 * p^2 + beta_g + beta_ux + eps_y

so every conditional expectation given x (or (x, g)) is a finite weighted sum.
The builder validates the factorization the moment restrictions rely on:
beta tables may vary only with (x, u1) (plus g for beta_g), alpha tables only
with (x, u2) (plus g for alpha_g), u1 and u2 are conditionally independent given
(x, g), price noise is independent of u1 and mean-zero given (x, u1, u2, g), and
outcome noise is mean-zero given everything else.

Atoms that should share a conditioning cell must use bitwise-identical floats;
grouping is by exact value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidModel
from .simulator import Dataset

_COEF_FIELDS = ("beta_p1", "beta_p2", "beta_g", "beta_ux", "alpha_g", "alpha_ux")


@dataclass(frozen=True)
class DiscreteSCM:
    """Validated finite-support structural model. Build via build_discrete_scm."""

    x: np.ndarray        # (m, q) atom covariates
    u1: np.ndarray       # (m,)
    u2: np.ndarray       # (m,)
    g: np.ndarray        # (m,)
    eps_p: np.ndarray    # (m,)
    eps_y: np.ndarray    # (m,)
    prob: np.ndarray     # (m,) strictly positive, sums to 1
    beta_p1: np.ndarray  # per-atom coefficient values
    beta_p2: np.ndarray
    beta_g: np.ndarray
    beta_ux: np.ndarray
    alpha_g: np.ndarray
    alpha_ux: np.ndarray
    p: np.ndarray = field(init=False)
    y: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.alpha_g + self.alpha_ux + self.eps_p
        y = self.beta_p1 * p + self.beta_p2 * p**2 + self.beta_g + self.beta_ux + self.eps_y
        for name in ("p", "y"):
            arr = {"p": p, "y": y}[name]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_atoms(self) -> int:
        return self.prob.shape[0]

    def x_support(self) -> np.ndarray:
        """Distinct covariate values, in first-appearance order."""
        seen: dict[tuple, int] = {}
        for row in self.x:
            seen.setdefault(tuple(row), len(seen))
        return np.asarray(sorted(seen, key=seen.get), dtype=float)

    def atoms_at(self, x) -> np.ndarray:
        """Indices of atoms with covariates exactly equal to x."""
        x = np.asarray(x, dtype=float)
        mask = np.all(self.x == x[None, :], axis=1)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise InvalidModel(f"x={tuple(x)} is not in the model support")
        return idx

    def sample(self, n: int, seed: int) -> Dataset:
        """Draw n i.i.d. observations (y, x, g, p) from the atom distribution."""
        if n <= 0:
            raise DataError(f"n must be positive, got {n}")
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.n_atoms, size=n, p=self.prob)
        return Dataset(y=self.y[idx], x=self.x[idx], g=self.g[idx], p=self.p[idx], seed=seed)


def _group_indices(*keys: np.ndarray) -> dict[tuple, np.ndarray]:
    m = keys[0].shape[0]
    flat = []
    for k in keys:
        k = np.asarray(k)
        flat.append(k.reshape(m, -1))
    stacked = np.hstack(flat)
    groups: dict[tuple, list[int]] = {}
    for i in range(m):
        groups.setdefault(tuple(stacked[i]), []).append(i)
    return {k: np.asarray(v) for k, v in groups.items()}


def _check_constant(values: np.ndarray, groups: dict, label: str, depends: str, atol: float):
    for key, idx in groups.items():
        vals = values[idx]
        if vals.max() - vals.min() > atol:
            raise InvalidModel(
                f"{label} must depend only on {depends}: values differ within cell {key} "
                f"(spread {vals.max() - vals.min():.3g})"
            )


def build_discrete_scm(
    x,
    u1,
    u2,
    g,
    eps_p,
    eps_y,
    prob,
    beta_p1,
    beta_p2,
    beta_g,
    beta_ux,
    alpha_g,
    alpha_ux,
    atol: float = 1e-10,
) -> DiscreteSCM:
    """Validate and assemble a DiscreteSCM from per-atom arrays.

    Raises InvalidModel on: probability mass not summing to 1 (1e-12), nonpositive
    probabilities, coefficient tables depending on latents they must not reference,
    violated conditional independence, or noise terms with nonzero conditional mean.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cols = {
        "u1": u1, "u2": u2, "g": g, "eps_p": eps_p, "eps_y": eps_y, "prob": prob,
        "beta_p1": beta_p1, "beta_p2": beta_p2, "beta_g": beta_g, "beta_ux": beta_ux,
        "alpha_g": alpha_g, "alpha_ux": alpha_ux,
    }
    m = x.shape[0]
    for name, col in cols.items():
        arr = np.asarray(col, dtype=float)
        if arr.shape != (m,):
            raise InvalidModel(f"{name} must have shape ({m},), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidModel(f"non-finite values in {name}")
        cols[name] = arr
    prob = cols["prob"]
    if (prob <= 0).any():
        raise InvalidModel("atom probabilities must be strictly positive")
    if abs(prob.sum() - 1.0) > 1e-12:
        raise InvalidModel(f"atom probabilities sum to {prob.sum()!r}, not 1 within 1e-12")

    u1c, u2c, gc, epc, eyc = cols["u1"], cols["u2"], cols["g"], cols["eps_p"], cols["eps_y"]

    # Factorization: which cells each table must be constant on.
    _check_constant(cols["beta_p1"], _group_indices(x, u1c), "beta_p1", "(x, u1)", atol)
    _check_constant(cols["beta_p2"], _group_indices(x, u1c), "beta_p2", "(x, u1)", atol)
    _check_constant(cols["beta_g"], _group_indices(x, u1c, gc), "beta_g", "(x, u1, g)", atol)
    _check_constant(cols["beta_ux"], _group_indices(x, u1c), "beta_ux", "(x, u1)", atol)
    _check_constant(cols["alpha_g"], _group_indices(x, u2c, gc), "alpha_g", "(x, u2, g)", atol)
    _check_constant(cols["alpha_ux"], _group_indices(x, u2c), "alpha_ux", "(x, u2)", atol)

    # u1 independent of u2 given (x, g).
    for key, idx in _group_indices(x, gc).items():
        w = prob[idx] / prob[idx].sum()
        pairs = _group_indices(u1c[idx], u2c[idx])
        pu1 = {k: w[v].sum() for k, v in _group_indices(u1c[idx]).items()}
        pu2 = {k: w[v].sum() for k, v in _group_indices(u2c[idx]).items()}
        for pk, pv in pairs.items():
            joint = w[pv].sum()
            expect = pu1[(pk[0],)] * pu2[(pk[1],)]
            if abs(joint - expect) > atol:
                raise InvalidModel(
                    f"u1 and u2 are not conditionally independent given (x, g) in cell {key}"
                )

    # Price noise: independent of u1 and conditionally mean-zero.
    for key, idx in _group_indices(x, u2c, gc).items():
        w = prob[idx] / prob[idx].sum()
        pairs = _group_indices(u1c[idx], epc[idx])
        pu1 = {k: w[v].sum() for k, v in _group_indices(u1c[idx]).items()}
        pep = {k: w[v].sum() for k, v in _group_indices(epc[idx]).items()}
        for pk, pv in pairs.items():
            joint = w[pv].sum()
            if abs(joint - pu1[(pk[0],)] * pep[(pk[1],)]) > atol:
                raise InvalidModel(f"eps_p is not independent of u1 given (x, u2, g) in cell {key}")
    for key, idx in _group_indices(x, u1c, u2c, gc).items():
        w = prob[idx] / prob[idx].sum()
        if abs(float(w @ epc[idx])) > atol:
            raise InvalidModel(f"eps_p has nonzero conditional mean in cell {key}")

    # Outcome noise: mean-zero given everything else.
    for key, idx in _group_indices(x, u1c, u2c, gc, epc).items():
        w = prob[idx] / prob[idx].sum()
        if abs(float(w @ eyc[idx])) > atol:
            raise InvalidModel(f"eps_y has nonzero conditional mean in cell {key}")

    arrays = dict(cols)
    arrays.pop("prob")
    model = DiscreteSCM(x=x, prob=prob, **arrays)
    for arr in (model.x, model.prob, *(getattr(model, f) for f in _COEF_FIELDS),
                model.u1, model.u2, model.g, model.eps_p, model.eps_y):
        arr.setflags(write=False)
    return model


def load_discrete_scm(path, atol: float = 1e-10) -> DiscreteSCM:
    """Load a DiscreteSCM from its JSON spec format.

    Layout: {"atoms": [{"x": [...], "u1": .., "u2": .., "g": .., "eps_p": ..,
    "eps_y": .., "prob": ..}, ...], "coefficients": {"beta_p1": [{"x": [...],
    "u1": .., "value": ..}, ...], ...}}. Coefficient tables are keyed by exactly
    the variables each function may reference; every atom must match one entry.
    """
    try:
        with open(path) as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read DiscreteSCM spec {path}: {exc}") from None
    try:
        atoms = spec["atoms"]
        coefs = spec["coefficients"]
    except (KeyError, TypeError):
        raise DataError(f"{path}: spec must contain 'atoms' and 'coefficients'") from None
    if not atoms:
        raise DataError(f"{path}: no atoms")

    keys_by_table = {
        "beta_p1": ("x", "u1"),
        "beta_p2": ("x", "u1"),
        "beta_g": ("x", "u1", "g"),
        "beta_ux": ("x", "u1", "u2"),
        "alpha_g": ("x", "u2", "g"),
        "alpha_ux": ("x", "u2"),
    }

    def atom_key(atom, fields):
        out = []
        for f in fields:
            if f == "x":
                out.extend(float(t) for t in atom[f])
            else:
                out.append(float(atom[f]))
        return tuple(out)

    cols = {name: [] for name in ("u1", "u2", "g", "eps_p", "eps_y", "prob")}
    xs = []
    try:
        for atom in atoms:
            xs.append([float(v) for v in atom["x"]])
            for name in cols:
                cols[name].append(float(atom[name]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed atom: {exc}") from None

    coef_cols = {}
    for table, fields in keys_by_table.items():
        try:
            entries = coefs[table]
        except KeyError:
            raise DataError(f"{path}: missing coefficient table {table}") from None
        lookup = {}
        for entry in entries:
            try:
                lookup[atom_key(entry, fields)] = float(entry["value"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed {table} entry: {exc}") from None
        values = []
        for atom in atoms:
            key = atom_key(atom, fields)
            if key not in lookup:
                raise DataError(f"{path}: {table} has no entry for cell {key}")
            values.append(lookup[key])
        coef_cols[table] = values

    return build_discrete_scm(x=xs, **cols, **coef_cols, atol=atol)
