"""Weighted pairwise likelihood for linear mixed models in complex samples."""

from .design import (
    DesignError,
    JackknifeReplicate,
    Stage,
    SurveyDesign,
    hajek_pair_prob,
    hajek_pair_prob_population,
    sampling_covariance,
)
from .structure import (
    ParameterVector,
    RandomStructure,
    SingularBlockError,
    StructureError,
    VarianceTerm,
    det_inv_2x2,
    grouping_term,
    preset,
    relatedness_term,
)
from .pairs import (
    DegenerateFitError,
    PairContext,
    PairObjectiveError,
    PairSet,
    RankDeficientError,
    all_pairs_objective,
    beta_hat,
    enumerate_pairs,
    pair_loglik,
    profile_deviance,
    sigma2_hat,
)
from .optim import Bounds, OptimizerError, OptResult, minimize_bounded, starting_values

__version__ = "0.1.0"
