"""Nonparanormal adjusted marginal inference for two-arm randomized trials.

Estimates marginal treatment effects (standardized mean difference, log-odds
ratio, log-hazard ratio) with precision gains from prognostic baseline
covariates, by joining marginal transformation models through a Gaussian
copula. Ships analytic standard-error and sample-size formulas plus a
simulation harness for size/power studies.
"""

__version__ = "0.1.0"

from .basis import (
    BasisSpec, Bernstein, DiscreteStep, Linear, LogLinear, MonotoneCoefficients,
    constrain, default_bernstein_support, evaluate_basis, transformation,
    transformation_derivative, unconstrain,
)
from .links import CLOGLOG, LOGIT, PROBIT, get_link
from .copula import (
    CopulaStructure, conditional_params, correlation_matrix, lambda_from_rho,
    lambda_to_omega, marginalize, mvn_logpdf, mvn_rectangle, outcome_correlations,
)
from .marginal import (
    Dataset, DegenerateDataError, MarginalFit, MarginalOutcomeModel,
    NonConvergenceError, Observation, ObservationColumn, effect_label,
    fit_marginal, latent_normal_score, marginal_cdf, probabilistic_index,
)
from .joint import (
    JointFitResult, JointModel, ThetaFull, conditional_outcome_cdf,
    diagnostics_link_ecdf, fit_ltm, fit_nami, joint_loglik,
)
from .analytic import (
    DesignSpec, expected_fisher_pair, sample_size, sample_size_binary,
    sample_size_continuous, sample_size_fraction, sample_size_survival,
    se_adjusted, se_unadjusted,
)
