"""Bayesian bi-level variable selection for binary regression.

Groups and the variables inside them are selected jointly under a
spike-and-slab prior; the posterior over inclusion indicators is sampled by
a tempering waste-free SMC sampler whose marginal likelihood is computed by
a Laplace (LA) or approximate Laplace (ALA) approximation.
"""

from .exceptions import (
    BilevelError,
    ConvergenceError,
    DatasetFormatError,
    InputError,
    NumericalError,
    SamplerError,
    UnsupportedError,
)
from .marglik import (
    ALA,
    LA,
    AlaCache,
    MarglikEvaluator,
    ala_log_marginal,
    la_log_marginal,
    newton_raphson_map,
    precompute_ala,
    quadrature_log_marginal,
)
from .model import (
    LOGIT,
    PROBIT,
    CoefVector,
    Dataset,
    PriorConfig,
    Theta,
    grad_hess_h,
    log_likelihood,
    log_prior_theta,
    neg_log_posterior_h,
)
from .oracle import EnumeratedPosterior, compare, enumerate_posterior
from .proposal import ProposalParams, WeightedThetaSample, fit_proposal, log_q, sample_proposal
from .smc import ParticleSystem, SmcConfig, SmcResult, run

__version__ = "0.1.0"
