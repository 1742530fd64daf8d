"""Leave-one-out potential-outcome (LOOP) estimates of average treatment effects."""

from .core import (Bernoulli, Blocked, CompleteRandomization, EstimateReport, Experiment,
                   ImputedOutcomes, Paired, combine_m, loop_estimate, signed_weight,
                   simple_difference, unit_effect)
from .designs import drop_arrangement_distribution, loop_with_random_drop
from .errors import LoopError
from .forest import ForestParams, fit_forest, predict, predict_oob
from .imputers import (ConstantImputer, ForestImputer, MeanImputer, OlsImputer, StrataImputer,
                       impute)
from .oracle_sim import (PotentialOutcomesTable, enumerate_oracle, gen_sim1, gen_sim2,
                         monte_carlo, ols_baseline)
from .variance import cov_hat_pair, gamma_bar_hat, mse_hats, variance_bound

__version__ = "0.1.0"

__all__ = [
    "Bernoulli", "Blocked", "CompleteRandomization", "EstimateReport", "Experiment",
    "ImputedOutcomes", "Paired", "combine_m", "loop_estimate", "signed_weight",
    "simple_difference", "unit_effect", "drop_arrangement_distribution",
    "loop_with_random_drop", "LoopError", "ForestParams", "fit_forest", "predict",
    "predict_oob", "ConstantImputer", "ForestImputer", "MeanImputer", "OlsImputer",
    "StrataImputer", "impute", "PotentialOutcomesTable", "enumerate_oracle", "gen_sim1",
    "gen_sim2", "monte_carlo", "ols_baseline", "cov_hat_pair", "gamma_bar_hat", "mse_hats",
    "variance_bound",
]
