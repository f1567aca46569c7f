"""Open-set domain adaptation by shared/private subspace factorization."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    FormatError,
    OpenSetProtocol,
    SyntheticSpec,
    apply_protocol,
    generate_synthetic,
    load_features,
    load_labels,
    save_features,
    save_labels,
)
from .evaluation import format_accuracy_table, run_experiment, score, sweep_epsilon
from .inference import (
    ClassifierSpec,
    assign_known_unknown,
    coefficient_ratio,
    encode_targets,
    predict,
    train_open_classifier,
)
from .model import (
    FactorizedModel,
    HyperParams,
    fit_auto,
    fit_dfroda,
    fit_dfroda_u,
    fit_froda,
    objective,
)
from .estimator import FRODAClassifier
from .persistence import load_model, save_model
from .solvers import SolverConfig, subspace_disagreement_dim

__all__ = [
    "format_accuracy_table",
    "ClassifierSpec",
    "Dataset",
    "FRODAClassifier",
    "FactorizedModel",
    "FormatError",
    "HyperParams",
    "OpenSetProtocol",
    "SolverConfig",
    "SyntheticSpec",
    "apply_protocol",
    "assign_known_unknown",
    "coefficient_ratio",
    "encode_targets",
    "fit_auto",
    "fit_dfroda",
    "fit_dfroda_u",
    "fit_froda",
    "generate_synthetic",
    "load_features",
    "load_labels",
    "load_model",
    "objective",
    "predict",
    "run_experiment",
    "save_features",
    "save_labels",
    "save_model",
    "score",
    "subspace_disagreement_dim",
    "sweep_epsilon",
    "train_open_classifier",
]
