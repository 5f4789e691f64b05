"""Penalty-weight selection by a modified BIC over a candidate grid.

Each candidate lambda gets a full penalized-EM fit with shared restart seeds
(so the comparison is not confounded by restart luck); the fitted mixture is
scored by its unpenalized log-likelihood minus half the total free-parameter
count times log of the observed-entry count, and the top score wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import math

import numpy as np

from .em import EmConfig, EmResult, as_observed, fit_pmoep
from .mixture import PenaltyConfig, PenaltyTooLargeError

logger = logging.getLogger(__name__)


@dataclass
class SelectionRecord:
    lam: float
    bic: float
    k_final: int | None
    result: EmResult | None
    error: str | None = None


@dataclass
class SelectionReport:
    records: list[SelectionRecord]
    chosen: SelectionRecord

    @property
    def chosen_lambda(self) -> float:
        return self.chosen.lam


def bic_score(result: EmResult, omega_size: int) -> float:
    """Fitted-mixture log-likelihood minus 0.5 * (sum_k D_k) * log |Omega|, D_k = 2."""
    loglik = float(result.model.mixture_log_pdf(result.residuals).sum())
    d_total = PenaltyConfig(0.0).d_k * result.k_final
    return loglik - 0.5 * d_total * math.log(omega_size)


def select_lambda(data, base_config: EmConfig, lambda_grid) -> SelectionReport:
    """Fit once per lambda candidate and return the BIC argmax.

    Ties break toward the larger lambda (the sparser model). Candidates whose
    fit fails are recorded with the error and excluded; if every candidate
    fails, the selection itself fails.
    """
    lambda_grid = [float(l) for l in lambda_grid]
    if not lambda_grid:
        raise ValueError("lambda grid must be non-empty")
    data = as_observed(data)
    records = []
    for lam in lambda_grid:
        config = replace(base_config, lam=lam)
        try:
            result = fit_pmoep(data, config)
        except (PenaltyTooLargeError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.warning("lambda=%g failed: %s", lam, exc)
            records.append(SelectionRecord(lam=lam, bic=-np.inf, k_final=None, result=None, error=str(exc)))
            continue
        records.append(
            SelectionRecord(
                lam=lam,
                bic=bic_score(result, data.n_obs),
                k_final=result.k_final,
                result=result,
            )
        )
    viable = [rec for rec in records if rec.result is not None]
    if not viable:
        raise RuntimeError("all lambda candidates failed")
    chosen = max(viable, key=lambda rec: (rec.bic, rec.lam))
    return SelectionReport(records=records, chosen=chosen)
