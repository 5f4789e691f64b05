"""Low-rank matrix factorization under mixture-of-exponential-power noise."""

__version__ = "0.1.0"

from .alm import AlmOptions, ProxWeights, factor_step, prox_scalar, prox_vector, solve_weighted_l2, solve_weighted_lrmf
from .data import FactorPair, ObservedMatrix
from .em import EmConfig, EmResult, fit_pmoep, objective_monotone_check
from .ep import EPParams, ep_abs_moment, ep_log_pdf, ep_pdf, ep_sample
from .mixture import MoEPModel, PenaltyConfig, Responsibilities, e_step, penalized_log_likelihood, update_eta, update_pi
from .mrf import GridShape, MrfConfig, fit_pmoep_mrf, lower_bound, variational_e_step
from .select import SelectionReport, bic_score, select_lambda

__all__ = [
    "AlmOptions", "ProxWeights", "factor_step", "prox_scalar", "prox_vector",
    "solve_weighted_l2", "solve_weighted_lrmf",
    "FactorPair", "ObservedMatrix",
    "EmConfig", "EmResult", "fit_pmoep", "objective_monotone_check",
    "EPParams", "ep_abs_moment", "ep_log_pdf", "ep_pdf", "ep_sample",
    "MoEPModel", "PenaltyConfig", "Responsibilities", "e_step",
    "penalized_log_likelihood", "update_eta", "update_pi",
    "GridShape", "MrfConfig", "fit_pmoep_mrf", "lower_bound", "variational_e_step",
    "SelectionReport", "bic_score", "select_lambda",
]
