"""Zero-mean exponential-power distribution: density, moments, parameter forms, sampling.

The density used throughout is

    f(x; p, eta) = p * eta^(1/p) / (2 * Gamma(1/p)) * exp(-eta * |x|^p),   p > 0, eta > 0,

which is Laplace with rate eta at p=1 and Gaussian with variance 1/(2*eta) at p=2.
Two other parameterizations are supported: the scale form with
sigma = (1/(p*eta))^(1/p) and the tau form with tau = eta^(-1/p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

_MAX_EXP = 700.0  # exp() overflows above ~709; leave headroom


@dataclass(frozen=True)
class EPParams:
    """Shape exponent p and precision eta of a zero-mean exponential-power law."""

    p: float
    eta: float

    def __post_init__(self):
        p, eta = self.p, self.eta
        if not (np.isfinite(p) and p > 0):
            raise ValueError(f"shape exponent p must be finite and > 0, got {p}")
        if not (np.isfinite(eta) and eta > 0):
            raise ValueError(f"precision eta must be finite and > 0, got {eta}")

    @classmethod
    def from_sigma(cls, p: float, sigma: float) -> "EPParams":
        """Build from the scale form, eta = 1 / (p * sigma^p)."""
        if not (np.isfinite(sigma) and sigma > 0):
            raise ValueError(f"sigma must be finite and > 0, got {sigma}")
        return cls(p=p, eta=1.0 / (p * sigma**p))

    @classmethod
    def from_tau(cls, p: float, tau: float) -> "EPParams":
        """Build from the tau form, eta = tau^(-p)."""
        if not (np.isfinite(tau) and tau > 0):
            raise ValueError(f"tau must be finite and > 0, got {tau}")
        return cls(p=p, eta=tau ** (-p))

    @property
    def sigma(self) -> float:
        return (1.0 / (self.p * self.eta)) ** (1.0 / self.p)

    @property
    def tau(self) -> float:
        return self.eta ** (-1.0 / self.p)


def ep_log_norm_const(p, eta):
    """log of the density normalizer p * eta^(1/p) / (2 * Gamma(1/p)).

    Accepts scalars or arrays (broadcast elementwise).
    """
    p = np.asarray(p, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return np.log(p) + np.log(eta) / p - math.log(2.0) - gammaln(1.0 / p)


def ep_log_pdf(x, params: EPParams):
    """Log-density log f(x; p, eta); scalar in, scalar out; array in, array out."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    out = ep_log_norm_const(params.p, params.eta) - params.eta * np.abs(x) ** params.p
    return float(out) if out.ndim == 0 else out


def ep_pdf(x, params: EPParams):
    return np.exp(ep_log_pdf(x, params))


def ep_abs_moment(k: int, params: EPParams) -> float:
    """Analytic absolute moment E|X|^k = tau^k * Gamma((k+1)/p) / Gamma(1/p)."""
    if int(k) != k or k < 1:
        raise ValueError(f"moment order k must be a positive integer, got {k}")
    p = params.p
    log_m = k * math.log(params.tau) + gammaln((k + 1) / p) - gammaln(1.0 / p)
    if log_m > _MAX_EXP:
        raise OverflowError(
            f"E|X|^{k} overflows double precision (log moment = {log_m:.3g}) "
            f"for p={p}, eta={params.eta}"
        )
    return math.exp(log_m)


def ep_sample(n: int, params: EPParams, rng, method: str = "transform") -> np.ndarray:
    """Draw n i.i.d. samples.

    method="transform" (any p > 0): g ~ Gamma(1/p, 1), x = sign * tau * g^(1/p).
    This is exact: |x|/tau then has density p * exp(-y^p) / Gamma(1/p).

    method="two-step" (0 < p < 1 only): gamma-mixture draw of an intermediate
    scale w followed by slice sampling of a triangular conditional. Kept as an
    independently testable second route for the sub-Laplacian range.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"sample count n must be a positive integer, got {n}")
    n = int(n)
    if method == "transform":
        g = rng.gamma(1.0 / params.p, 1.0, size=n)
        signs = rng.integers(0, 2, size=n) * 2 - 1
        return signs * params.tau * g ** (1.0 / params.p)
    if method == "two-step":
        if not 0 < params.p < 1:
            raise ValueError("two-step sampler is defined for 0 < p < 1 only")
        return _sample_two_step(n, params, rng)
    raise ValueError(f"unknown sampling method {method!r}")


def _sample_two_step(n: int, params: EPParams, rng, burn_in: int = 20) -> np.ndarray:
    p, tau = params.p, params.tau
    # w drawn from (1+p)/2 * Ga(2 + 1/p, 1) + (1-p)/2 * Ga(1 + 1/p, 1)
    pick_first = rng.random(n) < (1.0 + p) / 2.0
    w = np.where(
        pick_first,
        rng.gamma(2.0 + 1.0 / p, 1.0, size=n),
        rng.gamma(1.0 + 1.0 / p, 1.0, size=n),
    )
    # conditional density of x given w is triangular on [-a, a], a = tau * w^(1/p)
    a = tau * w ** (1.0 / p)
    x = np.zeros(n)
    for _ in range(burn_in):
        # slice height under g(x) = 1 - |x|/a, then the slice is |x| < a*(1-u)
        u = rng.uniform(0.0, 1.0 - np.abs(x) / a)
        half = a * (1.0 - u)
        x = rng.uniform(-half, half)
    return x
