"""Multivariate mixed Poisson regression and experience rating for disability insurance."""

from .core import (
    CHARACTERISTICS,
    GroupObservations,
    MixedPoissonFit,
    ObservationCell,
    PortfolioDataset,
    RateBasis,
    evaluate_rate,
    read_panel_csv,
    weighted_exposure_sums,
    write_panel_csv,
)
from .gamma_mix import GammaPrior, em_fit_independent_gamma, loglik_independent_gamma, posterior_gamma
from .glm import PoissonFitResult, fit_fixed_effects, fit_poisson, fit_standard, poisson_loglik
from .hier_mix import (
    GammaMixturePosterior,
    HierPrior,
    ecm_fit_hier,
    estep_hier,
    gamma_ratio_coefficients,
    occupancy_vector,
    polynomial_coefficients,
    posterior_theta0,
)
from .phasetype import (
    BivariatePH,
    UnivariatePH,
    WeightedSample2D,
    bivph_density,
    bivph_joint_laplace,
    build_posterior_target,
    em_fit_bivph_mixed_poisson,
    log_joint_count_density,
    matrix_exponential,
    ph_density,
    ph_laplace,
    posterior_cross_moment,
    posterior_log_density,
    weighted_bivph_em_step,
)
from .simulate import (
    PortfolioFrame,
    ScenarioConfig,
    SimulatedPath,
    aggregate_panel,
    build_frame,
    sample_clayton_pair,
    sample_entry_ages,
    sample_group_effects,
    sample_group_sizes,
    simulate_path,
    simulate_paths_dataset,
)
from .study import StudyConfig, StudyReport, compute_metrics, emit_outputs, run_scenario, scaled_group_effect
from .thiele import ProductSpec, ThieleGrid, portfolio_premiums, premium_for_entry_age, solve_thiele

__version__ = "0.1.0"
