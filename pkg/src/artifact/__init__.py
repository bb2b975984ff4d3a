"""Transfer learning for generalized linear models through correlation-ratio maps."""

from .correlation_ratio import (
    CorrelationRatioMatrix,
    HistoricalData,
    estimate_lambda_bias_corrected,
    estimate_lambda_plugin,
    estimate_omega,
)
from .cr_tll_engine import (
    TransferFit,
    Weights,
    bootstrap_ci,
    closed_form_linear,
    estimate_weights,
    james_stein_demo,
    maximize_cr_tll,
)
from .glm_core import ExponentialFamily, GlmFit, SampleSet, TargetSample, fit_mle
from .semiparametric import fit_partially_linear
from .sim_bench import ScenarioConfig, run_scenario, run_sweep
from .transfer_map import (
    map_density_based,
    map_linear_linear,
    map_linear_source,
    map_stein_normal,
    map_wu_ritt,
)

__version__ = "0.1.0"

__all__ = [
    "CorrelationRatioMatrix", "HistoricalData", "estimate_lambda_bias_corrected", "estimate_lambda_plugin",
    "estimate_omega", "TransferFit", "Weights", "bootstrap_ci", "closed_form_linear", "estimate_weights",
    "james_stein_demo", "maximize_cr_tll", "ExponentialFamily", "GlmFit", "SampleSet", "TargetSample",
    "fit_mle", "fit_partially_linear", "ScenarioConfig", "run_scenario", "run_sweep", "map_density_based",
    "map_linear_linear", "map_linear_source", "map_stein_normal", "map_wu_ritt",
]
