"""Joint modeling of multiple biomarkers and a time-to-event outcome.

The biomarkers share one latent trajectory, written as a mean curve plus a
few principal-component curves on an orthonormal B-spline basis.  The event
hazard depends on that trajectory.  Estimation is by EM with Gauss-Hermite
quadrature over the random effects.
"""

__version__ = "0.1.0"

from .bootstrap import BootstrapResult, bootstrap_inference
from .data import (
    ModelSpec,
    ParameterSet,
    StepHazard,
    SubjectRecord,
    infer_spec,
    latent_trajectory,
    load_dataset,
    load_params,
    reported,
    save_params,
    write_dataset,
)
from .em import FitConfig, FitResult, fit, observed_loglik, orthonormalize
from .errors import LatentJMError
from .predict import PredictionQuery, conditional_event_probability, prediction_error
from .quadrature import GaussHermiteRule, compute_posterior_summary, gauss_hermite
from .simulation import Scenario, paper_scenario, replicate_study, simulate
from .spline import BasisSpec, OrthoBasis, build_basis, eval_basis

__all__ = [
    "BasisSpec", "BootstrapResult", "FitConfig", "FitResult", "GaussHermiteRule",
    "LatentJMError", "ModelSpec", "OrthoBasis", "ParameterSet", "PredictionQuery", "Scenario",
    "StepHazard", "SubjectRecord", "bootstrap_inference", "build_basis",
    "compute_posterior_summary", "conditional_event_probability", "eval_basis", "fit",
    "gauss_hermite", "infer_spec", "latent_trajectory", "load_dataset", "load_params",
    "observed_loglik", "orthonormalize", "paper_scenario", "prediction_error",
    "replicate_study", "reported", "save_params", "simulate", "write_dataset",
]
