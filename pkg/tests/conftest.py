"""Shared test helpers: finite-support models and an independent inner ascent."""

from __future__ import annotations

import numpy as np

from ivprice.discrete_scm import build_discrete_scm
from ivprice.moments import residual_matrix


def product_scm(seed: int, n_x: int = 2, instrument_moves_price: bool = True):
    """Random finite-support structural model with factorized coefficients.

    Per covariate cell the latent pair, instrument, and the two noises are
    drawn as a product measure, so conditional independence and zero-mean
    noise hold exactly by construction. Coefficient tables reference only
    the variables they are allowed to: revenue coefficients (x, u1), the
    direct instrument effect (x, u1, g), price coefficients (x, u2) and
    (x, u2, g). With ``instrument_moves_price=False`` the price does not
    respond to the instrument at all, so the identification system loses
    rank at every covariate value.

    The instrument takes three values per cell: with only two, the
    g-weighted moment row is exactly proportional to the unweighted row
    (both reduce to the same contrast scaled by the swapped mean
    g1*w2 + g2*w1), so the 2x2 identification system is singular no matter
    how strongly the price responds.
    """
    rng = np.random.default_rng(seed)
    xs = np.round(rng.normal(size=(n_x, 2)), 3)
    names = ("u1", "u2", "g", "eps_p", "eps_y", "prob", "beta_p1", "beta_p2",
             "beta_g", "beta_ux", "alpha_g", "alpha_ux")
    cols: dict[str, list] = {name: [] for name in names}
    x_rows: list[np.ndarray] = []
    px = rng.dirichlet(np.full(n_x, 5.0))
    for i in range(n_x):
        u1v = np.round(rng.normal(size=2), 3)
        u2v = np.round(rng.normal(size=2), 3)
        gv = np.round(rng.normal(size=3), 3)
        w1 = rng.dirichlet((4.0, 4.0))
        w2 = rng.dirichlet((4.0, 4.0))
        wg = rng.dirichlet((4.0, 4.0, 4.0))
        ep = round(float(rng.uniform(0.1, 0.4)), 3)
        ey = round(float(rng.uniform(0.1, 0.4)), 3)
        b1 = {u: float(rng.uniform(1.0, 3.0)) for u in u1v}
        b2 = {u: float(rng.uniform(-1.5, -0.5)) for u in u1v}
        bux = {u: float(rng.normal()) for u in u1v}
        bg = {(u, gg): float(rng.normal()) for u in u1v for gg in gv}
        if instrument_moves_price:
            slope = float(rng.uniform(0.8, 1.6))
            ag = {(u, gg): slope * gg + 0.3 * float(rng.normal())
                  for u in u2v for gg in gv}
        else:
            # Price coefficient constant across g: the instrument moves
            # nothing on the price side, killing identification.
            flat = {u: 0.3 * float(rng.normal()) for u in u2v}
            ag = {(u, gg): flat[u] for u in u2v for gg in gv}
        aux = {u: float(rng.uniform(1.5, 2.5)) for u in u2v}
        for u1, pu1 in zip(u1v, w1):
            for u2, pu2 in zip(u2v, w2):
                for gg, pg in zip(gv, wg):
                    for sp in (-ep, ep):
                        for sy in (-ey, ey):
                            x_rows.append(xs[i])
                            cols["u1"].append(u1)
                            cols["u2"].append(u2)
                            cols["g"].append(gg)
                            cols["eps_p"].append(sp)
                            cols["eps_y"].append(sy)
                            cols["prob"].append(px[i] * pu1 * pu2 * pg * 0.25)
                            cols["beta_p1"].append(b1[u1])
                            cols["beta_p2"].append(b2[u1])
                            cols["beta_g"].append(bg[(u1, gg)])
                            cols["beta_ux"].append(bux[u1])
                            cols["alpha_g"].append(ag[(u2, gg)])
                            cols["alpha_ux"].append(aux[u2])
    prob = np.asarray(cols.pop("prob"))
    prob = prob / prob.sum()
    return build_discrete_scm(x=np.asarray(x_rows), prob=prob, **cols)


def atom_average_coefficients(scm, x) -> tuple[float, float]:
    """Probability-weighted revenue coefficients at one support point."""
    idx = scm.atoms_at(x)
    w = scm.prob[idx] / scm.prob[idx].sum()
    return float(w @ scm.beta_p1[idx]), float(w @ scm.beta_p2[idx])


def ascend_inner(dataset, alpha, alpha_tilde, lam, adv_map, max_iters=None):
    """Gradient-only ascent of the adversary's payoff, built from scratch.

    The payoff in the adversary weights T (8 x D) is
        J(T) = mean_i W_i' f(X_i) - mean_i (Wt_i' f(X_i))^2 - lam ||T||^2
    with f(x) = T phi(x). Ascent directions are conjugate gradients with
    exact line searches, computed purely from gradient evaluations and the
    matrix-free quadratic action. The eight residual components live on
    wildly different scales (revenue-weighted rows versus price-only rows),
    which makes the quadratic so ill-conditioned that plain first-order
    ascent stalls in float64; rescaling each coordinate by the diagonal
    curvature (computed directly as mean(W_k^2 phi_d^2)) restores fast
    convergence while keeping the method gradient-only. Nothing is shared
    with the closed-form solver beyond the residual definition.
    """
    phi = adv_map(dataset.x)
    n, D = phi.shape
    W = residual_matrix(dataset.y, dataset.g, dataset.p,
                        alpha.evaluate(dataset.x, dataset.g))
    Wt = residual_matrix(dataset.y, dataset.g, dataset.p,
                         alpha_tilde.evaluate(dataset.x, dataset.g))
    a = W.T @ phi / n

    def hess_apply(T):
        """Action of the (negated) Hessian 2 (M + lam I) on T."""
        s = ((phi @ T.T) * Wt).sum(1)
        return 2.0 * ((Wt * s[:, None]).T @ phi / n + lam * T)

    def value(T):
        f_vals = phi @ T.T
        return (float((W * f_vals).sum() / n)
                - float(((Wt * f_vals).sum(1) ** 2).mean())
                - lam * float((T * T).sum()))

    diag_curv = 2.0 * ((Wt**2).T @ (phi**2) / n + lam)
    if max_iters is None:
        max_iters = 40000
    T = np.zeros((8, D))
    residual = a.copy()              # gradient of J at T = 0
    scaled = residual / diag_curv
    direction = scaled.copy()
    rz = float((residual * scaled).sum())
    gg0 = float((residual * residual).sum())
    tol2 = (1e-12 ** 2) * max(gg0, np.finfo(float).tiny)
    for _ in range(max_iters):
        if float((residual * residual).sum()) <= tol2:
            break
        hd = hess_apply(direction)
        denom = float((direction * hd).sum())
        if denom <= 0:
            break
        step = rz / denom
        T = T + step * direction
        residual = residual - step * hd
        scaled = residual / diag_curv
        rz_new = float((residual * scaled).sum())
        direction = scaled + (rz_new / rz) * direction
        rz = rz_new
    return T, value(T)
