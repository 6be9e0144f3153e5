"""Desk-scale low-dose fan-beam CT reconstruction laboratory.

A small numpy/scipy library covering the full simulation-to-evaluation
chain: phantoms and fan-beam geometry, a matched forward/back projector
pair, filtered backprojection, a photon-statistics noise model with
matching WLS weights, classic iterative solvers (gradient descent, ADMM
with TV), denoiser-driven reconstruction loops, a trainable unrolled
reconstruction network with its own reverse-mode gradient engine, and a
PSNR/SSIM evaluation harness.
"""

from .core import (
    Ellipse,
    FanBeamGeometry,
    Image,
    ImageGrid,
    LinearOperatorContract,
    Sinogram,
    analytic_sinogram,
    fan_geometry_for_grid,
    make_grid,
    random_phantom,
    rasterize_ellipses,
    shepp_logan,
    shepp_logan_ellipses,
)
from .projector import (
    FbpFilter,
    ProjectionOperator,
    back_project,
    build_system_matrix,
    fbp,
    forward_project,
    vvbp_stack,
)
from .noise import (
    EPS_COUNT,
    EPS_VAR,
    LowCountWarning,
    NoiseModel,
    beer_lambert,
    estimate_variances,
    log_transform,
    noise_sigma2,
    simulate_low_dose,
)
from .objectives import (
    LossSpec,
    TvRegularizer,
    WlsFidelity,
    composite_loss,
    edge_incoherence,
    mae,
    mse,
    power_method,
    projection_consistency_loss,
    ssim,
    tv_loss,
    tv_prox,
    tv_value,
    wls_gradient,
    wls_value,
)
from .learned import (
    AdamW,
    ConvDenoiser,
    GradientTape,
    UnrolledNet,
    UnrolledStage,
    backprop,
    denoiser_forward,
    param_init,
    unrolled_forward,
    unrolled_train,
)
from .solvers import (
    AdmmState,
    CgWarning,
    DenoiserContract,
    DivergenceError,
    GaussianDenoiser,
    IdentityDenoiser,
    SolverConfig,
    admm_reconstruct,
    cg_solve,
    gd_reconstruct,
    pnp_run,
    red_reconstruct,
    train_denoiser_dependent,
    train_denoiser_independent,
)
from .pipeline import (
    DualDomainConfig,
    MetricsReport,
    SumReducer,
    dual_domain_run,
    evaluate,
    psnr,
)

__version__ = "0.1.0"
