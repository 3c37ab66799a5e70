"""Spliced Binned-Pareto predictive distributions, EVT baselines and calibration tools."""

from .distributions import BinnedDistribution, GeneralizedPareto, SplicedBinnedPareto, splice
from .evt import DetectorState, Kind, StepOutcome, dspot_init, dspot_step, fit_gpd_mle, pot_quantile, spot_init, spot_step
from .rng import CounterRNG

__all__ = [
    "BinnedDistribution",
    "CounterRNG",
    "DetectorState",
    "GeneralizedPareto",
    "Kind",
    "SplicedBinnedPareto",
    "StepOutcome",
    "dspot_init",
    "dspot_step",
    "fit_gpd_mle",
    "pot_quantile",
    "splice",
    "spot_init",
    "spot_step",
]

__version__ = "0.1.0"
