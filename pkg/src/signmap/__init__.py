"""Joint mapping and calibration from bearing-only detections.

Estimates the number and 2-D positions of map objects (e.g. road signs) from
large batches of noisy camera rays via soft EM clustering: loopy-BP data
association, regularized Newton triangulation, and variational training of
per-class sensor parameters.
"""

__version__ = "0.1.0"

from .assoc import AssociationProblem, Marginals, enumerate_exact, run_bp
from .calibrate import AdamState, ElboReport, TrainConfig, adam_step, elbo, train
from .cluster import ClusterResult, EmConfig, merge, prune, run_em
from .domain import (
    InvariantError,
    ObjectHypothesis,
    Ray,
    Rect,
    SceneBatch,
    SensorParams,
    make_ray,
    wrap_angle,
)
from .evaluate import PrCurve, default_thresholds, match, pr_curve
from .priors import PriorDensity, fit_affinity, log_prior
from .sensor import (
    AssignmentEval,
    LikelihoodEval,
    assignment_potential,
    detect_prob,
    existence_potential,
    log_f,
)
from .solver import NewtonReport, assemble_loss, newton_step, posterior_covariance
from .synth import SynthConfig, generate

__all__ = [
    "__version__",
    "AssociationProblem", "Marginals", "enumerate_exact", "run_bp",
    "AdamState", "ElboReport", "TrainConfig", "adam_step", "elbo", "train",
    "ClusterResult", "EmConfig", "merge", "prune", "run_em",
    "InvariantError", "ObjectHypothesis", "Ray", "Rect", "SceneBatch",
    "SensorParams", "make_ray", "wrap_angle",
    "PrCurve", "default_thresholds", "match", "pr_curve",
    "PriorDensity", "fit_affinity", "log_prior",
    "AssignmentEval", "LikelihoodEval", "assignment_potential",
    "detect_prob", "existence_potential", "log_f",
    "NewtonReport", "assemble_loss", "newton_step", "posterior_covariance",
    "SynthConfig", "generate",
]
