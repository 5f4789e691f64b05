"""Augmented Lagrangian solver for the weighted mixed p-norm factorization step.

Minimizes sum_k ||W_(k) . (Y - U V^T)||_{p_k}^{p_k} over rank-r factors by
splitting on an auxiliary matrix L = U V^T: a truncated-SVD factor step, an
elementwise proximal step on L, a multiplier update, and a growing penalty.
The proximal subproblem per observed entry is

    min_s  0.5*(t - s)^2 + (1/rho) * sum_k c_k |s|^{p_k},

solved in closed form for powers in {1, 2} and by safeguarded Newton with
multi-start plus an explicit s=0 comparison otherwise (the objective is
nonsmooth at 0 and nonconvex for p < 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import FactorPair, ObservedMatrix

logger = logging.getLogger(__name__)

_NEWTON_MAX_STEPS = 40
_CONV_TOL = 1e-12


@dataclass
class AlmOptions:
    """Penalty schedule and stopping rule for the inner solver."""

    rho0: float = 1e-2
    alpha: float = 1.05
    max_iter: int = 200
    tol: float = 1e-7

    def __post_init__(self):
        if self.rho0 <= 0:
            raise ValueError("rho0 must be positive")
        if self.alpha <= 1.0:
            raise ValueError("alpha must be > 1 so the penalty grows")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class AlmState:
    """Auxiliary matrix L, multiplier, penalty rho and growth factor alpha."""

    l: np.ndarray
    mult: np.ndarray
    rho: float
    alpha: float
    iteration: int = 0


@dataclass
class ProxWeights:
    """Per-entry, per-component proximal coefficients c_ik = eta_k * gamma_ik.

    ``coeff`` is (n_obs, K) over the observed entries (implicitly zero off the
    mask), ``powers`` the shared exponents p_k.
    """

    coeff: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        self.coeff = np.atleast_2d(np.asarray(self.coeff, dtype=float))
        self.powers = np.atleast_1d(np.asarray(self.powers, dtype=float))
        if self.coeff.shape[1] != self.powers.size:
            raise ValueError("coeff columns must match number of powers")
        if np.any(self.coeff < 0):
            raise ValueError("prox coefficients must be nonnegative")
        if np.any(self.powers <= 0):
            raise ValueError("powers must be positive")

    @classmethod
    def from_model(cls, model, resp) -> "ProxWeights":
        """Coefficients eta_k * gamma_ik from a mixture model and responsibilities."""
        return cls(coeff=resp.gamma * model.eta[None, :], powers=model.p.copy())

    def objective(self, residuals: np.ndarray) -> float:
        """Weighted data term sum_i sum_k c_ik |e_i|^{p_k}."""
        e = np.abs(np.asarray(residuals, dtype=float))
        return float((self.coeff * e[:, None] ** self.powers[None, :]).sum())

    def l2_amplitude(self, data: ObservedMatrix) -> np.ndarray:
        """Amplitude weight matrix sqrt(sum_k c_ik) on the mask (all-p=2 fast path)."""
        w = np.zeros(data.shape)
        w[data.obs_rows, data.obs_cols] = np.sqrt(self.coeff.sum(axis=1))
        return w


def factor_step(target: np.ndarray, r: int) -> FactorPair:
    """Best rank-r factor pair for ||target - U V^T||_F via truncated SVD.

    Singular values are split evenly between the factors (U_r sqrt(S), V_r sqrt(S)).
    """
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise ValueError("factor_step target must be finite")
    if r < 1 or r > min(target.shape):
        raise ValueError(f"rank {r} out of range for shape {target.shape}")
    u, s, vt = np.linalg.svd(target, full_matrices=False)
    root = np.sqrt(s[:r])
    return FactorPair(u[:, :r] * root, vt[:r].T * root)


def _prox_objective(s, tt, coeff, powers, rho):
    pen = (coeff * s[:, None] ** powers[None, :]).sum(axis=1)
    return 0.5 * (tt - s) ** 2 + pen / rho


def _phi_pair(s, tt, coeff, powers, rho):
    """Stationarity residual phi(s) = s - tt + (1/rho) sum_k c_k p_k s^(p_k-1) and phi'(s)."""
    sp = s[:, None] ** (powers - 2.0)[None, :]
    grad = (coeff * powers[None, :] * sp * s[:, None]).sum(axis=1)
    curv = (coeff * (powers * (powers - 1.0))[None, :] * sp).sum(axis=1)
    return s - tt + grad / rho, 1.0 + curv / rho


def _newton_bracketed(tt, coeff, powers, rho):
    """Single-root Newton/bisection for the convex case (all powers >= 1)."""
    n = tt.size
    c1 = coeff[:, powers == 1.0].sum(axis=1)
    s = np.zeros(n)
    active = c1 / rho - tt < 0  # otherwise the minimizer is exactly 0
    if not np.any(active):
        return s
    lo = np.zeros(n)
    hi = tt.copy()
    s[active] = tt[active]
    for _ in range(_NEWTON_MAX_STEPS + 10):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        phi, dphi = _phi_pair(s[idx], tt[idx], coeff[idx], powers, rho)
        pos = phi > 0
        hi[idx[pos]] = s[idx[pos]]
        lo[idx[~pos]] = s[idx[~pos]]
        step = phi / dphi
        s_new = s[idx] - step
        bad = ~np.isfinite(s_new) | (s_new <= lo[idx]) | (s_new >= hi[idx])
        s_new[bad] = 0.5 * (lo[idx[bad]] + hi[idx[bad]])
        done = np.abs(s_new - s[idx]) <= _CONV_TOL * (1.0 + np.abs(s_new))
        s[idx] = s_new
        active[idx[done]] = False
    return s


def _newton_in_bracket(lo, hi, tt, coeff, powers, rho):
    """Root of phi inside a sign-change bracket [lo, hi], Newton with bisection safeguard."""
    s = hi.copy()
    active = np.ones(tt.size, dtype=bool)
    for _ in range(_NEWTON_MAX_STEPS):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        phi, dphi = _phi_pair(s[idx], tt[idx], coeff[idx], powers, rho)
        pos = phi > 0
        hi[idx[pos]] = s[idx[pos]]
        lo[idx[~pos]] = s[idx[~pos]]
        with np.errstate(divide="ignore", invalid="ignore"):
            s_new = s[idx] - phi / dphi
        bad = ~np.isfinite(s_new) | (s_new <= lo[idx]) | (s_new >= hi[idx])
        s_new[bad] = 0.5 * (lo[idx[bad]] + hi[idx[bad]])
        done = np.abs(s_new - s[idx]) <= _CONV_TOL * (1.0 + np.abs(s_new))
        s[idx] = s_new
        active[idx[done]] = False
    return s


def _golden_section(tt, coeff, powers, rho, iters=80):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a = np.zeros_like(tt)
    b = tt.copy()
    for _ in range(iters):
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = _prox_objective(c, tt, coeff, powers, rho)
        fd = _prox_objective(d, tt, coeff, powers, rho)
        take_left = fc < fd
        b = np.where(take_left, d, b)
        a = np.where(take_left, a, c)
    return 0.5 * (a + b)


def prox_vector(t, coeff, powers, rho: float) -> np.ndarray:
    """Elementwise minimizers of 0.5 (t_i - s)^2 + (1/rho) sum_k c_ik |s|^{p_k}.

    ``t`` is (n,), ``coeff`` (n, K) nonnegative, ``powers`` (K,) positive.
    Odd in t by construction: the problem is reduced to t >= 0.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    coeff = np.atleast_2d(np.asarray(coeff, dtype=float))
    powers = np.atleast_1d(np.asarray(powers, dtype=float))
    if rho <= 0:
        raise ValueError("rho must be positive")
    if t.size == 0:
        return t.copy()
    sign = np.sign(t)
    tt = np.abs(t)

    if np.all(powers == 2.0):
        s = tt / (1.0 + 2.0 * coeff.sum(axis=1) / rho)
    elif np.all((powers == 1.0) | (powers == 2.0)):
        c1 = coeff[:, powers == 1.0].sum(axis=1)
        c2 = coeff[:, powers == 2.0].sum(axis=1)
        s = np.maximum(0.0, tt - c1 / rho) / (1.0 + 2.0 * c2 / rho)
    elif np.all(powers >= 1.0):
        s = _newton_bracketed(tt, coeff, powers, rho)
    else:
        s = _prox_nonconvex(tt, coeff, powers, rho)
    return sign * s


_SCAN_FRACTIONS = np.geomspace(1e-12, 1.0, 22)


def _prox_nonconvex(tt, coeff, powers, rho):
    """Global scalar minimizer when some power is < 1 (objective nonconvex, kink at 0).

    phi has a pole at 0+ wherever a sub-1 power carries weight and is
    nonnegative at tt, so every interior local minimum sits at a
    negative-to-positive sign change of phi. A geometric scan of the sign
    pattern over (0, tt] brackets the crossings (at most one for powers in
    (0, 2], where phi is unimodal); safeguarded Newton polishes each root,
    and the winner is chosen by explicit objective comparison against s = 0
    (the nonsmooth point, frequently the global minimizer) and s = tt. Rows
    where phi dips negative without a scanned crossing fall back to
    golden-section search.
    """
    n = tt.size
    best_s = np.zeros(n)
    best_obj = _prox_objective(best_s, tt, coeff, powers, rho)

    def consider(points, mask=None):
        nonlocal best_s, best_obj
        obj = _prox_objective(points, tt, coeff, powers, rho)
        upd = obj < best_obj
        if mask is not None:
            upd &= mask
        best_s = np.where(upd, points, best_s)
        best_obj = np.where(upd, obj, best_obj)

    consider(tt)
    live = tt > 0
    s_grid = tt[:, None] * _SCAN_FRACTIONS[None, :]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        grad = (
            coeff[:, None, :]
            * powers[None, None, :]
            * s_grid[:, :, None] ** (powers - 1.0)[None, None, :]
        ).sum(axis=-1)
    phi_grid = s_grid - tt[:, None] + grad / rho
    neg = (phi_grid < 0) & live[:, None]
    crossings = neg[:, :-1] & ~neg[:, 1:]
    rows, js = np.nonzero(crossings)
    if rows.size:
        roots = _newton_in_bracket(
            s_grid[rows, js].copy(), s_grid[rows, js + 1].copy(),
            tt[rows], coeff[rows], powers, rho,
        )
        root_obj = _prox_objective(roots, tt[rows], coeff[rows], powers, rho)
        row_best = np.full(n, np.inf)
        np.minimum.at(row_best, rows, root_obj)
        winner = root_obj <= row_best[rows]
        root_per_row = np.zeros(n)
        root_per_row[rows[winner]] = roots[winner]
        consider(root_per_row, mask=row_best < np.inf)
    stuck = live & neg.any(axis=1) & ~crossings.any(axis=1)
    if np.any(stuck):
        point = np.zeros(n)
        point[stuck] = _golden_section(tt[stuck], coeff[stuck], powers, rho)
        consider(point, mask=stuck)
    return best_s


def prox_scalar(t: float, weights, rho: float) -> float:
    """Scalar proximal map; ``weights`` is a sequence of (c, p) pairs."""
    weights = list(weights)
    coeff = np.array([[c for c, _ in weights]], dtype=float)
    powers = np.array([p for _, p in weights], dtype=float)
    return float(prox_vector(np.array([t], dtype=float), coeff, powers, rho)[0])


def l_step(
    data: ObservedMatrix,
    factors: FactorPair,
    state: AlmState,
    weights: ProxWeights,
) -> np.ndarray:
    """Exact minimizer of the augmented Lagrangian in L given factors and multiplier.

    Observed entries solve the scalar prox problem with t = y - uv + mult/rho;
    unobserved entries take the unconstrained quadratic minimum uv - mult/rho.
    """
    uv = factors.product()
    l_new = uv - state.mult / state.rho
    rows, cols = data.obs_rows, data.obs_cols
    t = data.y[rows, cols] - uv[rows, cols] + state.mult[rows, cols] / state.rho
    s = prox_vector(t, weights.coeff, weights.powers, state.rho)
    l_new[rows, cols] = data.y[rows, cols] - s
    return l_new


def solve_weighted_lrmf(
    data: ObservedMatrix,
    weights: ProxWeights,
    r: int,
    init: FactorPair,
    opts: AlmOptions | None = None,
) -> tuple[FactorPair, dict]:
    """Alternating ALM loop; stops on feasibility ||L - UV^T||_F / ||Y||_F <= tol.

    On hitting the iteration cap the best-feasibility iterate is returned with
    ``converged`` False (the objective is nonconvex; no optimality claim).
    """
    opts = opts or AlmOptions()
    state = AlmState(
        l=init.product(),
        mult=np.zeros(data.shape),
        rho=opts.rho0,
        alpha=opts.alpha,
    )
    y_norm = max(data.norm_obs(), np.finfo(float).tiny)
    best_feas = np.inf
    best_factors = init.copy()
    factors = init
    feas_trace = []
    for it in range(opts.max_iter):
        factors = factor_step(state.l + state.mult / state.rho, r)
        state.l = l_step(data, factors, state, weights)
        gap = state.l - factors.product()
        state.mult = state.mult + state.rho * gap
        state.iteration = it + 1
        feas = np.linalg.norm(gap) / y_norm
        feas_trace.append(feas)
        if feas < best_feas:
            best_feas = feas
            best_factors = factors
        if feas <= opts.tol:
            return factors, {
                "converged": True,
                "iterations": state.iteration,
                "feasibility": feas,
                "feasibility_trace": np.array(feas_trace),
            }
        state.rho *= opts.alpha
    logger.debug(
        "inner solver hit iteration cap (feasibility %.3e)", best_feas
    )
    return best_factors, {
        "converged": False,
        "iterations": state.iteration,
        "feasibility": best_feas,
        "feasibility_trace": np.array(feas_trace),
    }


def solve_weighted_l2(
    data: ObservedMatrix,
    weights: np.ndarray,
    r: int,
    init: FactorPair,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[FactorPair, dict]:
    """Alternating exact weighted least squares for min ||W . (Y - U V^T)||_F^2.

    ``weights`` are amplitude weights (zero marks a discarded entry). Each row
    solve is an exact coordinate minimization, so the objective never increases.
    """
    w2 = np.asarray(weights, dtype=float) ** 2
    if w2.shape != data.shape:
        raise ValueError("weights shape must match the data matrix")
    w2 = np.where(data.mask, w2, 0.0)
    wy = w2 * data.y
    u, v = init.u.copy(), init.v.copy()
    trace = []
    ridged = False

    def _solve_rows(w2_rows, wy_rows, basis):
        nonlocal ridged
        a = np.einsum("ij,jk,jl->ikl", w2_rows, basis, basis)
        b = (wy_rows @ basis)[:, :, None]
        try:
            x = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            x = None
        if x is None or not np.all(np.isfinite(x)):
            ridged = True
            r = basis.shape[1]
            scale = 1.0 + np.trace(a, axis1=1, axis2=2) / r
            a = a + (1e-10 * scale)[:, None, None] * np.eye(r)[None, :, :]
            x = np.linalg.solve(a, b)
        return x[:, :, 0]

    obj_prev = np.inf
    for it in range(max_iter):
        u = _solve_rows(w2, wy, v)
        v = _solve_rows(w2.T, wy.T, u)
        obj = float((w2 * (data.y - u @ v.T) ** 2).sum())
        trace.append(obj)
        if obj_prev - obj <= tol * (1.0 + abs(obj)):
            break
        obj_prev = obj
    return FactorPair(u, v), {
        "objective_trace": np.array(trace),
        "iterations": len(trace),
        "ridged": ridged,
    }
