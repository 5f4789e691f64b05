"""Spatio-temporal coupling of noise-component labels via a Markov random field.

For grid-shaped data (rows index pixels of an h x w image, columns index
frames) the latent component indicators of neighbouring entries are encouraged
to agree. Exact posteriors are intractable, so the E-step becomes a damped
mean-field fixed-point iteration and the monitored quantity a variational
lower bound; the M-step is unchanged from the plain penalized EM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ObservedMatrix
from .em import EmConfig, EmResult, _fit_driver, as_observed, fit_pmoep
from .mixture import MoEPModel, Responsibilities, e_step, penalty_term

NEIGHBOR_SCHEMES = ("spatial4+temporal2", "spatial4")


@dataclass
class GridShape:
    """Maps matrix entries to (pixel, frame) grid coordinates.

    Rows index pixels of an ``height x width`` image in row-major order and
    columns index frames; set ``transpose`` when the matrix is laid out the
    other way around.
    """

    height: int
    width: int
    frames: int
    transpose: bool = False
    scheme: str = "spatial4+temporal2"

    def __post_init__(self):
        if self.scheme not in NEIGHBOR_SCHEMES:
            raise ValueError(f"unknown neighborhood scheme {self.scheme!r}")
        if min(self.height, self.width, self.frames) < 1:
            raise ValueError("grid dimensions must be positive")

    @property
    def matrix_shape(self) -> tuple[int, int]:
        hw = self.height * self.width
        return (self.frames, hw) if self.transpose else (hw, self.frames)

    def check(self, shape: tuple[int, int]) -> None:
        if tuple(shape) != self.matrix_shape:
            raise ValueError(
                f"grid {self.height}x{self.width}x{self.frames} implies matrix shape "
                f"{self.matrix_shape}, got {shape}"
            )

    def edges(self, data: ObservedMatrix) -> np.ndarray:
        """Directed neighbor pairs (a, b) between observed entries, as indices
        into the flat observed vector. Both directions are present, so the
        pair relation is symmetric by construction; entries whose neighbour is
        missing are simply not coupled to it.
        """
        self.check(data.shape)
        obs_index = np.full(data.shape, -1, dtype=np.int64)
        obs_index[data.obs_rows, data.obs_cols] = np.arange(data.n_obs)
        if self.transpose:
            cube = obs_index.T.reshape(self.height, self.width, self.frames)
        else:
            cube = obs_index.reshape(self.height, self.width, self.frames)

        pairs = []

        def couple(a, b):
            ok = (a >= 0) & (b >= 0)
            pairs.append(np.stack([a[ok], b[ok]], axis=1))

        couple(cube[:-1, :, :].ravel(), cube[1:, :, :].ravel())   # vertical
        couple(cube[:, :-1, :].ravel(), cube[:, 1:, :].ravel())   # horizontal
        if self.scheme == "spatial4+temporal2":
            couple(cube[:, :, :-1].ravel(), cube[:, :, 1:].ravel())  # temporal
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        half = np.concatenate(pairs, axis=0)
        return np.concatenate([half, half[:, ::-1]], axis=0)


@dataclass
class MrfConfig:
    """Coupling strength and fixed-point iteration controls."""

    tau: float = 10.0
    max_sweeps: int = 200
    damping: float = 0.5
    tol: float = 1e-6

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise ValueError("tau must be finite and >= 0")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


def neighbor_sums(edges: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """S[a, k] = sum of gamma[b, k] over neighbours b of a."""
    out = np.zeros_like(gamma)
    if edges.size:
        np.add.at(out, edges[:, 0], gamma[edges[:, 1]])
    return out


def variational_e_step(
    residuals: np.ndarray,
    model: MoEPModel,
    edges: np.ndarray,
    mrf: MrfConfig,
    gamma_init: Responsibilities,
) -> Responsibilities:
    """Damped mean-field fixed point for the coupled responsibilities.

    Iterates gamma_ak proportional to pi_k f(e_a) exp(tau * sum_nbr gamma_bk),
    renormalized over k each synchronous sweep, with damped updates
    gamma <- (1-d) gamma + d gamma_new until the max-abs change drops below
    tolerance. With tau = 0 (or no edges) this is exactly the plain E-step.
    """
    if mrf.tau == 0.0 or edges.size == 0:
        return e_step(residuals, model)
    with np.errstate(divide="ignore"):
        log_lik = model.log_component_pdf(np.asarray(residuals, float)) + np.log(model.pi)[None, :]
    dead = ~np.isfinite(log_lik.max(axis=1))
    if np.any(dead):
        log_lik[dead] = 0.0  # likelihood uninformative: coupling alone decides
    gamma = gamma_init.gamma.copy()
    converged = False
    for _ in range(mrf.max_sweeps):
        logits = log_lik + mrf.tau * neighbor_sums(edges, gamma)
        logits -= logits.max(axis=1, keepdims=True)
        new = np.exp(logits)
        new /= new.sum(axis=1, keepdims=True)
        new = (1.0 - mrf.damping) * gamma + mrf.damping * new
        delta = np.abs(new - gamma).max()
        gamma = new
        if delta < mrf.tol:
            converged = True
            break
    return Responsibilities(
        gamma=gamma,
        n_underflow=int(np.count_nonzero(dead)),
        fixed_point_converged=converged,
    )


def lower_bound(
    residuals: np.ndarray,
    model: MoEPModel,
    edges: np.ndarray,
    mrf: MrfConfig,
    resp: Responsibilities,
) -> float:
    """Mean-field evidence lower bound, up to the dropped MRF log-normalizer.

    Data term sum_ak gamma_ak [log pi_k + log f_k(e_a)], pairwise coupling
    tau * sum_edges sum_k (2 gamma_ak - 1)(2 gamma_bk - 1) over directed
    edges, and the mean-field entropy with 0 log 0 = 0.
    """
    gamma = resp.gamma
    with np.errstate(divide="ignore"):
        log_lik = model.log_component_pdf(np.asarray(residuals, float)) + np.log(model.pi)[None, :]
    masked = np.where(gamma > 0, log_lik, 0.0)  # gamma=0 kills -inf log terms
    data_term = float((gamma * masked).sum())
    pair_term = 0.0
    if edges.size:
        g = 2.0 * gamma - 1.0
        pair_term = float(mrf.tau * (g[edges[:, 0]] * g[edges[:, 1]]).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(gamma > 0, gamma * np.log(gamma), 0.0)
    return data_term + pair_term - float(ent.sum())


def fit_pmoep_mrf(
    data,
    grid: GridShape,
    config: EmConfig,
    mrf: MrfConfig,
) -> EmResult:
    """Variational EM with MRF-coupled responsibilities.

    The M-step machinery (weight update with pruning, precision update,
    factor solve) is identical to the plain fit; only the E-step and the
    monitored objective change. tau = 0 delegates to fit_pmoep outright,
    reproducing it exactly.
    """
    data = as_observed(data)
    grid.check(data.shape)
    if mrf.tau == 0.0:
        return fit_pmoep(data, config)
    edges = grid.edges(data)

    def posterior(residuals, model, resp_prev):
        if resp_prev is None or resp_prev.k != model.k:
            resp_prev = e_step(residuals, model)
        return variational_e_step(residuals, model, edges, mrf, resp_prev)

    def objective(residuals, model, resp, penalty, scale):
        if resp is None:
            resp = posterior(residuals, model, None)
        return lower_bound(residuals, model, edges, mrf, resp) - penalty_term(
            model.pi, penalty, scale
        )

    return _fit_driver(data, config, posterior_fn=posterior, objective_fn=objective)
