"""Variational inference of smooth latent trajectories from spike trains.

The package fits a point-process observation model with spike self-history
to simultaneously recorded neurons, with an independent Gaussian-process
prior on each dimension of a shared low-dimensional latent trajectory.
Inference is coordinate-ascent on the evidence lower bound with low-rank
kernel factors, so one iteration scales linearly in the recording length.
"""

__version__ = "0.1.0"

from .exceptions import (
    IndefiniteKernelError,
    NonFiniteUpdateError,
    NumericalError,
    ValidationError,
    VlgpError,
)
from .kernels import (
    CholFactor,
    GPPrior,
    KernelSpec,
    cov_matrix,
    incomplete_cholesky,
    kernel_log_grads,
    sq_exp_cov,
)
from .model import (
    EXP_CAP,
    LatentPosterior,
    ModelParams,
    SpikeData,
    build_history,
    elbo,
    expected_rate,
    pp_loglik,
)
from .initialization import FAResult, factor_analysis, init_history_weights
from .inference import (
    FitConfig,
    FitReport,
    constrain,
    fit,
    infer_posterior,
    newton_alpha,
    newton_beta,
    newton_mu,
    update_hyper,
    update_w_and_v,
)
from .simulate import (
    DEFAULT_HISTORY_FILTER,
    LDSParams,
    SimSpec,
    generate_spikes_lds_poisson,
    generate_spikes_pp,
    lds_trajectory,
    lorenz_trajectory,
    random_lds,
    sample_gp_latent,
    simulate_dataset,
)
from .evaluate import (
    PredictionSet,
    lono_predict,
    noise_corr_empirical,
    noise_corr_from_model,
    noise_corr_power,
    orthogonalize_latents,
    pll,
    predictive_r2,
    pseudo_r2,
    rank_correlation,
    rectified_rate_from_gaussian,
    subspace_angle,
)

__all__ = [name for name in dir() if not name.startswith("_")]
