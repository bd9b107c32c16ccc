"""Robust MAP synchronization of over-complete scene-object predictions.

Pipeline: generate or import scenes -> corrupt (or ingest real neural
predictions) -> fit priors -> optionally learn hyperparameters ->
synchronize -> evaluate.
"""

from .gmm import Gmm1D, Gmm2D, fit_gmm_em
from .hyperlearn import (
    HyperLearnConfig,
    PhiPacker,
    cross_validate_meta,
    hyper_loss,
    learn_hyper,
)
from .metrics import (
    attribute_l2,
    indicator_pr,
    penetration_rate,
    relative_histogram_kl,
)
from .objective import (
    ABAR_DIM,
    HyperParams,
    ObjectiveCore,
    PredictionBundle,
    RobustParams,
    default_robust_params,
    geman_mcclure,
    geman_mcclure_deriv,
    objective_f,
    objective_grad_attrs,
    objective_grad_indicators,
)
from .optimize import OptimizeConfig, OptimizeReport, synchronize
from .priors import (
    CountPrior,
    PriorModel,
    RelativePrior,
    TranslationPrior,
    count_prior_logpdf,
    fit_priors,
    regularizer_l,
)
from .relative import (
    EDGE_DIM,
    RelativeAttributes,
    RelativeTensor,
    build_relative_tensor,
    phi,
    phi_all,
    phi_jacobian,
)
from .rotation import euler_to_rotation, rotation_to_euler, wrap_angle
from .scene import (
    ATTR_DIM,
    ClassTable,
    ObjectAttributes,
    SceneLayout,
    SceneParseError,
    SceneSchemaError,
    SceneSlot,
    load_scene,
    save_scene,
)
from .synthgen import (
    CorruptionConfig,
    GrammarConfig,
    corrupt,
    default_class_table,
    generate,
)

__version__ = "0.1.0"

__all__ = [
    "ABAR_DIM",
    "ATTR_DIM",
    "EDGE_DIM",
    "ClassTable",
    "CorruptionConfig",
    "CountPrior",
    "Gmm1D",
    "Gmm2D",
    "GrammarConfig",
    "HyperLearnConfig",
    "HyperParams",
    "ObjectAttributes",
    "ObjectiveCore",
    "OptimizeConfig",
    "OptimizeReport",
    "PhiPacker",
    "PredictionBundle",
    "PriorModel",
    "RelativeAttributes",
    "RelativePrior",
    "RelativeTensor",
    "RobustParams",
    "SceneLayout",
    "SceneParseError",
    "SceneSchemaError",
    "SceneSlot",
    "TranslationPrior",
    "attribute_l2",
    "build_relative_tensor",
    "corrupt",
    "count_prior_logpdf",
    "cross_validate_meta",
    "default_class_table",
    "default_robust_params",
    "euler_to_rotation",
    "fit_gmm_em",
    "fit_priors",
    "generate",
    "geman_mcclure",
    "geman_mcclure_deriv",
    "hyper_loss",
    "indicator_pr",
    "learn_hyper",
    "load_scene",
    "objective_f",
    "objective_grad_attrs",
    "objective_grad_indicators",
    "penetration_rate",
    "phi",
    "phi_all",
    "phi_jacobian",
    "regularizer_l",
    "relative_histogram_kl",
    "rotation_to_euler",
    "save_scene",
    "synchronize",
    "wrap_angle",
]
