"""Penalized EM driver for low-rank factorization under mixture-of-EP noise.

Each outer iteration: posterior responsibilities over noise components,
penalized mixing-weight update with pruning of zeroed components, precision
update, and a factor refit that minimizes the responsibility-weighted mixed
p-norm (ALM inner solver, or alternating weighted least squares when every
surviving component is Gaussian). The penalized observed-data objective is
recorded per iteration and is guaranteed non-decreasing up to a small slack:
the factor step only accepts an improvement of the weighted data term, and an
iteration that fails to ascend reverts to the previous state and stops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .alm import (
    AlmOptions,
    FactorPair,
    ProxWeights,
    factor_step,
    solve_weighted_l2,
    solve_weighted_lrmf,
)
from .data import ObservedMatrix
from .mixture import (
    ETA_MAX,
    ETA_MIN,
    MoEPModel,
    PenaltyConfig,
    Responsibilities,
    e_step,
    penalized_log_likelihood,
    update_eta,
    update_pi,
)

logger = logging.getLogger(__name__)

ASCENT_SLACK = 1e-8


@dataclass
class EmConfig:
    """Settings for the penalized EM fit."""

    rank: int
    p_candidates: tuple = (0.5, 1.0, 1.5, 2.0)
    lam: float = 0.01
    tol: float = 1e-6
    max_outer: int = 100
    restarts: int = 5
    seed: int = 0
    epsilon: float = 1e-6
    penalty_scale: str = "observed"  # "observed" (|Omega|) or "columns" (literal n)
    # inner schedule tuned for warm starts: rho0 of order 1 keeps the incoming
    # factors relevant (a tiny rho0 lets the first prox step erase them), and
    # the faster growth reaches a feasibility-enforcing penalty within the cap
    inner: AlmOptions = field(
        default_factory=lambda: AlmOptions(rho0=1.0, alpha=1.25, max_iter=100, tol=1e-7)
    )
    use_l2_path: bool = True
    eta_init: str = "moment"  # "moment" (scale-matched to init residuals) or "ones"
    # log-range of per-restart random scale multipliers on the initial
    # precisions (restart 0 stays unperturbed). The winner of the first
    # responsibility race depends on the initial scales, so restarts explore
    # different race outcomes and the best final objective decides.
    eta_explore: float = 1.5
    init: str = "svd"  # "svd" (truncated SVD plus per-restart perturbation) or "random"
    # degeneracy guard: the factors carry r*(m+n) free parameters, so a
    # component claiming at most capacity_margin times that many entries can
    # owe its tiny residuals entirely to factor overfitting (the classic
    # unbounded-mixture-likelihood failure). Such components have their
    # precision validated out of support: the factors are refit with the
    # claimed entries' weights zeroed and eta is capped at the level the
    # held-out prediction residuals actually justify. Components with broader
    # support are exempt (genuine structure, e.g. the exactly low-rank clean
    # entries under sparse noise, always exceeds the capacity).
    validate_precision: bool = True
    capacity_margin: float = 1.5

    def __post_init__(self):
        self.p_candidates = tuple(float(p) for p in self.p_candidates)
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if len(self.p_candidates) < 1 or any(p <= 0 for p in self.p_candidates):
            raise ValueError("p_candidates must be positive and non-empty")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.penalty_scale not in ("observed", "columns"):
            raise ValueError("penalty_scale must be 'observed' or 'columns'")
        if self.eta_init not in ("moment", "ones"):
            raise ValueError("eta_init must be 'moment' or 'ones'")
        if self.init not in ("svd", "random"):
            raise ValueError("init must be 'svd' or 'random'")

    @property
    def k_start(self) -> int:
        return len(self.p_candidates)


@dataclass
class EmResult:
    """Fitted factors, surviving mixture model, and run diagnostics."""

    factors: FactorPair
    model: MoEPModel
    resp: Responsibilities
    objective_trace: np.ndarray
    k_final: int
    converged: bool
    residuals: np.ndarray
    diagnostics: dict


def as_observed(data) -> ObservedMatrix:
    if isinstance(data, ObservedMatrix):
        return data
    return ObservedMatrix.from_dense(data)


def fit_pmoep(data, config: EmConfig) -> EmResult:
    """Penalized-EM fit over several random restarts.

    Restarts run sequentially with seeds spawned from ``config.seed``; the
    restart with the highest final penalized objective wins. A restart that
    fails numerically is excluded; if all fail, the error propagates.
    """
    return _fit_driver(data, config, posterior_fn=None, objective_fn=None)


def _fit_driver(data, config, posterior_fn, objective_fn) -> EmResult:
    """Shared restart loop; hooks swap the posterior and objective computations.

    ``posterior_fn(residuals, model, resp_prev)`` and
    ``objective_fn(residuals, model, resp, penalty, scale)`` default to the
    plain mixture E-step and penalized log-likelihood.
    """
    data = as_observed(data)
    m, n = data.shape
    if data.n_obs < config.rank * (m + n):
        raise ValueError(
            f"too few observed entries: {data.n_obs} < rank*(m+n) = {config.rank * (m + n)}"
        )
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    svd_init = factor_step(data.y, config.rank) if config.init == "svd" else None
    best = None
    failures = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        try:
            result = _single_run(data, config, rng, posterior_fn, objective_fn,
                                 svd_init=svd_init, perturb=i > 0)
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("restart %d failed: %s", i, exc)
            failures.append(str(exc))
            continue
        if best is None or result.objective_trace[-1] > best.objective_trace[-1]:
            best = result
    if best is None:
        raise RuntimeError(f"all {config.restarts} restarts failed: {failures}")
    best.diagnostics["restarts_failed"] = len(failures)
    return best


def _single_run(data, config, rng, posterior_fn, objective_fn,
                svd_init=None, perturb=True) -> EmResult:
    m, n = data.shape
    r = config.rank
    penalty = PenaltyConfig(config.lam, config.epsilon)
    pen_scale = n if config.penalty_scale == "columns" else data.n_obs

    if svd_init is not None:
        factors = svd_init.copy()
        if perturb:
            # keep restart diversity: jitter around the spectral initializer
            factors.u += 0.3 * factors.u.std() * rng.standard_normal((m, r))
            factors.v += 0.3 * factors.v.std() * rng.standard_normal((n, r))
    else:
        init_sd = np.sqrt(data.norm_obs() / np.sqrt(m * n * r))
        factors = FactorPair(
            rng.standard_normal((m, r)) * init_sd,
            rng.standard_normal((n, r)) * init_sd,
        )
    k0 = config.k_start
    p_init = np.array(config.p_candidates)
    if config.eta_init == "moment":
        # per-component maximum-likelihood scale on the bulk of the initial
        # residuals (top quartile trimmed so gross outliers cannot widen every
        # component), letting the first responsibilities race on shape rather
        # than scale mismatch
        e0 = np.abs(data.residuals(factors.u, factors.v))
        bulk = np.sort(e0)[: max(1, int(0.75 * e0.size))]
        eta0 = np.clip(
            1.0 / (p_init * np.maximum(np.mean(bulk[:, None] ** p_init[None, :], axis=0), 1e-300)),
            ETA_MIN,
            ETA_MAX,
        )
    else:
        eta0 = np.ones(k0)
    if perturb and config.eta_explore > 0:
        eta0 = eta0 * np.exp(rng.uniform(-config.eta_explore, config.eta_explore, size=k0))
    eta0 = np.clip(eta0, ETA_MIN, ETA_MAX)
    model = MoEPModel(p=p_init, eta=eta0, pi=np.full(k0, 1.0 / k0))
    resp = None
    diag = {
        "underflow_entries": 0,
        "eta_clamped": 0,
        "factor_safeguard_hits": 0,
        "ascent_stalled": False,
        "inner_iterations": 0,
        "precision_capped": 0,
        "prune_events": [],
        "k_trace": [k0],
        "share_trace": [],
        "eta_trace": [],
    }

    residuals = data.residuals(factors.u, factors.v)

    def _objective(e, mdl, rsp):
        if objective_fn is None:
            return penalized_log_likelihood(e, mdl, penalty, pen_scale)
        return objective_fn(e, mdl, rsp, penalty, pen_scale)

    trace = [_objective(residuals, model, resp)]
    converged = False
    for it in range(config.max_outer):
        snapshot = (factors, model, resp, residuals)

        if posterior_fn is None:
            resp = e_step(residuals, model)
        else:
            resp = posterior_fn(residuals, model, resp)
        diag["underflow_entries"] += resp.n_underflow

        pi_new = update_pi(resp, penalty, data.n_obs)
        keep = pi_new > 0
        if not np.all(keep):
            diag["prune_events"].append((it, int(np.count_nonzero(~keep))))
            resp = resp.subset(keep)
        model = MoEPModel(p=model.p[keep], eta=model.eta[keep], pi=pi_new[keep])
        diag["k_trace"].append(model.k)

        eta_new = update_eta(resp, residuals, model)
        if config.validate_precision:
            # growth guard only: a cap below the current precision would cause
            # a likelihood cliff, so precision may hold but not rise past the
            # out-of-support level
            caps = np.maximum(_oos_eta_caps(data, config, model, resp, factors), model.eta)
            capped = eta_new > caps
            if np.any(capped):
                diag["precision_capped"] += int(np.count_nonzero(capped))
                eta_new = np.minimum(eta_new, caps)
        diag["eta_clamped"] += int(np.count_nonzero((eta_new >= ETA_MAX) | (eta_new <= ETA_MIN)))
        model = MoEPModel(p=model.p, eta=eta_new, pi=model.pi)
        diag["share_trace"].append(np.round(resp.component_totals() / data.n_obs, 3))
        diag["eta_trace"].append(np.round(eta_new, 4))

        weights = ProxWeights.from_model(model, resp)
        if config.use_l2_path and np.all(model.p == 2.0):
            new_factors, info = solve_weighted_l2(
                data, weights.l2_amplitude(data), r, factors
            )
        else:
            new_factors, info = solve_weighted_lrmf(data, weights, r, factors, config.inner)
        diag["inner_iterations"] += info["iterations"]

        # generalized M-step safeguard: only accept factors that do not worsen
        # the responsibility-weighted data term
        new_residuals = data.residuals(new_factors.u, new_factors.v)
        if weights.objective(new_residuals) <= weights.objective(residuals):
            factors, residuals = new_factors, new_residuals
        else:
            diag["factor_safeguard_hits"] += 1

        obj = _objective(residuals, model, resp)
        if obj < trace[-1] - ASCENT_SLACK * (1.0 + abs(trace[-1])):
            # inexact inner solve broke ascent: restore and stop this restart
            factors, model, resp, residuals = snapshot
            diag["ascent_stalled"] = True
            break
        rel_change = abs(obj - trace[-1]) / (1.0 + abs(obj))
        trace.append(obj)
        if rel_change < config.tol:
            converged = True
            break

    if resp is None:  # stalled before the first completed iteration
        resp = e_step(residuals, model)
    return EmResult(
        factors=factors,
        model=model,
        resp=resp,
        objective_trace=np.array(trace),
        k_final=model.k,
        converged=converged,
        residuals=residuals,
        diagnostics=diag,
    )


def _oos_eta_caps(data, config, model, resp, factors) -> np.ndarray:
    """Out-of-support precision caps for components small enough to be overfit.

    For each component whose claimed entries (posterior weight >= 1/2) number
    at most capacity_margin * r * (m+n), the factors are refit with those
    entries removed from the weighted least-squares problem and the component's
    precision is capped at the maximum-likelihood value of the held-out
    prediction residuals. A component claiming more entries than the factor
    parameter count cannot owe its fit to interpolation and is left free.
    """
    m, n = data.shape
    r = config.rank
    capacity = config.capacity_margin * r * (m + n)
    claims = resp.gamma >= 0.5
    sizes = claims.sum(axis=0)
    caps = np.full(model.k, np.inf)
    check = (sizes > 0) & (sizes <= capacity)
    if not np.any(check):
        return caps
    for k in np.nonzero(check)[0]:
        held_out = claims[:, k]
        if data.n_obs - int(held_out.sum()) < r * max(m, n):
            continue  # not enough support left to validate against
        # weights of the mixture WITHOUT component k, so its own (possibly
        # runaway) precision cannot leak into the validation refit
        others = np.arange(model.k) != k
        coeff = (resp.gamma[:, others] * model.eta[None, others]).sum(axis=1)
        w = np.zeros(data.shape)
        keep = ~held_out
        w[data.obs_rows[keep], data.obs_cols[keep]] = np.sqrt(coeff[keep])
        refit, _ = solve_weighted_l2(data, w, r, factors, max_iter=15, tol=1e-9)
        e_oos = np.abs(data.residuals(refit.u, refit.v)[held_out])
        mean_pow = float(np.mean(e_oos ** model.p[k]))
        if mean_pow > 0:
            caps[k] = 1.0 / (model.p[k] * mean_pow)
    return caps


def objective_monotone_check(trace) -> tuple[bool, int]:
    """Check a trace is non-decreasing up to slack 1e-8*(1+|value|) per step.

    Returns (True, -1) when monotone, else (False, i) with i the index of the
    first entry that drops below its predecessor beyond the slack.
    """
    trace = np.asarray(trace, dtype=float)
    for i in range(1, trace.size):
        if trace[i] < trace[i - 1] - ASCENT_SLACK * (1.0 + abs(trace[i - 1])):
            return False, i
    return True, -1
