"""Mixture-of-exponential-power noise model and its penalized EM update steps.

The mixture density over a residual e is sum_k pi_k * f(e; p_k, eta_k), with a
log-type penalty on the mixing weights that drives weak components to exactly
zero so the component count is learned rather than fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .ep import ep_log_norm_const

ETA_MIN = 1e-8
ETA_MAX = 1e8


class PenaltyTooLargeError(ValueError):
    """Raised when lambda * 2K >= 1 and the mixing-weight update is undefined."""


@dataclass
class MoEPModel:
    """K mixture components with shape p_k, precision eta_k and weight pi_k."""

    p: np.ndarray
    eta: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        self.pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        if not (self.p.shape == self.eta.shape == self.pi.shape):
            raise ValueError("p, eta, pi must have equal length")
        if self.p.size < 1:
            raise ValueError("model needs at least one component")
        if not np.all(np.isfinite(self.p)) or np.any(self.p <= 0):
            raise ValueError("all shape exponents must be finite and > 0")
        if not np.all(np.isfinite(self.eta)) or np.any(self.eta <= 0):
            raise ValueError("all precisions must be finite and > 0")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-10:
            raise ValueError("mixing weights must be nonnegative and sum to 1")

    @property
    def k(self) -> int:
        return self.p.size

    def log_component_pdf(self, e: np.ndarray) -> np.ndarray:
        """(n, K) array of log f(e_i; p_k, eta_k), without mixing weights."""
        e = np.asarray(e, dtype=float)
        const = ep_log_norm_const(self.p, self.eta)
        return const[None, :] - self.eta[None, :] * np.abs(e)[:, None] ** self.p[None, :]

    def mixture_log_pdf(self, e: np.ndarray) -> np.ndarray:
        """(n,) array of log sum_k pi_k f(e_i; p_k, eta_k) via log-sum-exp."""
        with np.errstate(divide="ignore"):
            log_w = np.log(self.pi)
        return logsumexp(self.log_component_pdf(e) + log_w[None, :], axis=1)

    def subset(self, keep: np.ndarray) -> "MoEPModel":
        """Model restricted to the components selected by the boolean mask."""
        if not np.any(keep):
            raise ValueError("cannot prune every component")
        return MoEPModel(self.p[keep], self.eta[keep], self.pi[keep])


@dataclass
class PenaltyConfig:
    """Weight lambda and floor epsilon of the log penalty on mixing proportions.

    d_k is the free-parameter count per component (pi_k and eta_k, hence 2).
    """

    lam: float
    epsilon: float = 1e-6
    d_k: int = 2

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0 < self.epsilon <= 1e-2:
            raise ValueError(f"epsilon must lie in (0, 1e-2], got {self.epsilon}")
        if self.d_k != 2:
            raise ValueError("d_k is fixed at 2 (one weight, one precision)")


@dataclass
class Responsibilities:
    """Per-entry posterior weights gamma (n_obs, K) over mixture components.

    ``fixed_point_converged`` is False when a variational fixed-point
    iteration returned its last iterate without meeting tolerance.
    """

    gamma: np.ndarray
    n_underflow: int = 0
    fixed_point_converged: bool = True

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.ndim != 2:
            raise ValueError("gamma must be (n_obs, K)")

    @property
    def k(self) -> int:
        return self.gamma.shape[1]

    def component_totals(self) -> np.ndarray:
        return self.gamma.sum(axis=0)

    def subset(self, keep: np.ndarray) -> "Responsibilities":
        return Responsibilities(
            self.gamma[:, keep], self.n_underflow, self.fixed_point_converged
        )


def e_step(residuals: np.ndarray, model: MoEPModel) -> Responsibilities:
    """Posterior component weights gamma_ik proportional to pi_k f(e_i; p_k, eta_k).

    Computed in log space. Entries where every component underflows to zero
    density get a uniform row, counted in ``n_underflow``.
    """
    residuals = np.asarray(residuals, dtype=float)
    if not np.all(np.isfinite(residuals)):
        raise ValueError("residuals must be finite")
    with np.errstate(divide="ignore"):
        log_unnorm = model.log_component_pdf(residuals) + np.log(model.pi)[None, :]
    row_max = np.max(log_unnorm, axis=1)
    dead = ~np.isfinite(row_max)
    if np.any(dead):
        log_unnorm[dead] = 0.0
        row_max = np.where(dead, 0.0, row_max)
    shifted = np.exp(log_unnorm - row_max[:, None])
    gamma = shifted / shifted.sum(axis=1, keepdims=True)
    return Responsibilities(gamma=gamma, n_underflow=int(np.count_nonzero(dead)))


def update_pi(
    resp: Responsibilities, penalty: PenaltyConfig, omega_size: int
) -> np.ndarray:
    """Penalized mixing-weight update.

    Returns a length-K vector where components driven to zero are exactly 0
    (flagged for pruning) and the survivors are renormalized to sum to one.
    """
    k = resp.k
    d_hat = penalty.d_k * k
    if penalty.lam * d_hat >= 1.0:
        raise PenaltyTooLargeError(
            f"penalty too large for current K: lambda*2K = {penalty.lam * d_hat:.4g} >= 1"
        )
    n_bar = resp.component_totals() / omega_size
    raw = np.maximum(0.0, (n_bar - penalty.lam * penalty.d_k) / (1.0 - penalty.lam * d_hat))
    total = raw.sum()
    if total <= 0:
        raise RuntimeError("all mixing weights truncated to zero")
    return raw / total


def update_eta(
    resp: Responsibilities, residuals: np.ndarray, model: MoEPModel
) -> np.ndarray:
    """Precision update eta_k = N_k / (p_k * sum_i gamma_ik |e_i|^{p_k}).

    Clamped to [ETA_MIN, ETA_MAX]; a zero denominator (component sees only
    exactly-zero residuals) pins eta_k at the upper clamp.
    """
    residuals = np.asarray(residuals, dtype=float)
    n_k = resp.component_totals()
    if np.any(n_k <= 0):
        raise ValueError("every surviving component needs positive responsibility mass")
    abs_pow = np.abs(residuals)[:, None] ** model.p[None, :]
    denom = model.p * np.einsum("ik,ik->k", resp.gamma, abs_pow)
    eta = np.full(model.k, ETA_MAX)
    ok = denom > 0
    eta[ok] = n_k[ok] / denom[ok]
    return np.clip(eta, ETA_MIN, ETA_MAX)


def penalized_log_likelihood(
    residuals: np.ndarray,
    model: MoEPModel,
    penalty: PenaltyConfig,
    scale: float,
) -> float:
    """Observed-data mixture log-likelihood minus the log-type weight penalty.

    ``scale`` is the factor multiplying lambda in the penalty; the EM driver
    chooses it (matrix column count, or the observed-entry count that keeps
    the penalty consistent with the mixing-weight update).
    """
    loglik = float(model.mixture_log_pdf(np.asarray(residuals, dtype=float)).sum())
    pen = penalty_term(model.pi, penalty, scale)
    return loglik - pen


def penalty_term(pi: np.ndarray, penalty: PenaltyConfig, scale: float) -> float:
    """scale * lambda * sum_k D_k * log((eps + pi_k)/eps); zero-weight terms vanish."""
    return float(
        scale * penalty.lam * penalty.d_k
        * np.log((penalty.epsilon + pi) / penalty.epsilon).sum()
    )
