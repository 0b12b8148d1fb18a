"""Metastable switching linear dynamical systems: estimation and sampling."""

from .dataio import (
    Dataset,
    load_dataset,
    read_trajectory,
    write_trajectory,
)
from .errors import DataError, InvalidParamsError, NumericalError
from .estep import EStepResult, RawStats, estep
from .gmm import GmmConfig, GmmFit, gmm_em, init_model, kmeanspp_seed
from .model import (
    ModelParams,
    StabilityReport,
    StateDynamics,
    StateGaussian,
    Trajectory,
    check_stability,
    iterated_moments,
    model_from_json,
    model_to_json,
    sample_trajectory,
    shift_from_mean,
    validate_stability,
)
from .mstep import MStepConfig, MStepReport, mstep, mstep_with_report
from .pipeline import (
    FitConfig,
    FitReport,
    coherence_metric,
    double_well_params,
    fit,
    score,
    synth_double_well,
)
from .solver import FeasibilityResult, SolverConfig, feasibility_search, frank_wolfe

__all__ = [
    "Dataset",
    "load_dataset",
    "read_trajectory",
    "write_trajectory",
    "DataError",
    "InvalidParamsError",
    "NumericalError",
    "EStepResult",
    "RawStats",
    "estep",
    "GmmConfig",
    "GmmFit",
    "gmm_em",
    "init_model",
    "kmeanspp_seed",
    "ModelParams",
    "StabilityReport",
    "StateDynamics",
    "StateGaussian",
    "Trajectory",
    "check_stability",
    "iterated_moments",
    "model_from_json",
    "model_to_json",
    "sample_trajectory",
    "shift_from_mean",
    "validate_stability",
    "MStepConfig",
    "MStepReport",
    "mstep",
    "mstep_with_report",
    "FitConfig",
    "FitReport",
    "coherence_metric",
    "double_well_params",
    "fit",
    "score",
    "synth_double_well",
    "FeasibilityResult",
    "SolverConfig",
    "feasibility_search",
    "frank_wolfe",
]

__version__ = "0.1.0"
