"""Forward and inverse scattering by generalized point interactions in R^3."""
from .greens import ComplexEnergy, DomainError, g0_1d, g0_2d, g0_3d, gram_diag, gram_offdiag, sqrt_upper
from .inverse import (
    CoverageError,
    FitOptions,
    LiftSpec,
    PlaneSamples,
    RankDeficiency,
    ReconstructionResult,
    ReconstructOptions,
    SearchBox,
    fit_model,
    lift_to_halfspace,
    locate_scatterers,
    plane_grid,
    reconstruct,
    synthesize_plane_data,
)
from .krein import (
    Configuration,
    ConfigurationError,
    KreinMatrix,
    NearResonance,
    alpha_to_config,
    krein_identity_residual,
    krein_matrix,
    p_inverse,
    perturbed_green,
    tan_half_to_theta,
    theta_to_tan_half,
)
from .scattering import (
    SphereQuadrature,
    amplitude,
    optical_theorem_residual,
    reality_defect,
    reciprocity_defect,
    s_matrix_apply,
    scattering_wave,
    sphere_quadrature,
)

__version__ = "0.1.0"
