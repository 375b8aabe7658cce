"""Latent models driven by generalized-hyperbolic noise.

Composable sparse latent operators, exact Gibbs conditionals, Monte Carlo
and Rao-Blackwellized stochastic gradients, MAP estimation with multi-chain
diagnostics, Langevin posterior sampling, and posterior prediction with
proper scoring.
"""

from .distributions import (
    GigParams,
    NoiseSpec,
    gh_noise_sample,
    gig_logpdf,
    gig_moments,
    gig_sample,
    mixing_prior,
    noise_kld,
    noise_logpdf,
)
from .mesh import FemMatrices, Mesh1D, build_interval_mesh, fem_matrices
from .operators import (
    LatentOperator,
    advdiff_operator,
    ar1_operator,
    bivariate_operator,
    matern_operator,
    operator_dtheta,
    ou_operator,
    pin_operator,
    replicate_operator,
    rw_operator,
    tensor_operator,
)
from .model import LatentState, Model, PriorSet, assemble_model, simulate
from .gibbs import GibbsDraws, conditional_w_params, gibbs_run, sample_v, sample_w
from .gradients import (
    GradientReport,
    augmented_grad,
    augmented_loglik,
    mc_gradient,
    prior_grad,
    rb_gradient,
    trace_term,
)
from .inference import (
    CheckpointTrace,
    FitOptions,
    FitResult,
    SgldOptions,
    drift_check,
    grad_inner_stat,
    map_fit,
    rhat,
    sgld_sample,
    to_natural,
    to_unconstrained,
)
from .prediction import (
    PredictiveSamples,
    ScoreReport,
    crps_sample,
    posterior_predict,
    score_report,
    scrps_sample,
)

__version__ = "0.1.0"
