"""Predictor-class comparison toolkit for linear dynamical systems."""

from .control import (
    ControlReport,
    MpcGain,
    closed_loop_eval,
    clipped_cost,
    mpc_gain,
    stabilization_sweep,
)
from .lti import (
    Dataset,
    InnovationsForm,
    LtiSystem,
    MisspecRollout,
    SolverError,
    Trajectory,
    WellSpecRollout,
    build_rollout_misspec,
    build_rollout_wellspec,
    kalman_innovations,
    make_system,
    psd_sqrt,
    simulate,
    solve_dlyap,
    spectral_radius,
    stationary_regressor_cov,
    stationary_state_cov,
)
from .nonlinear import KoopmanSystem, nonlinear_comparison, simulate_koopman
from .predictors import (
    DivergenceError,
    FitReport,
    IntermediateFitConfig,
    Predictor,
    PredictorClass,
    SingularRegressorError,
    empirical_loss,
    fit_intermediate,
    fit_multi_step,
    fit_single_step,
    population_loss_misspec,
    population_loss_wellspec,
    rollout_composition,
)
from .theory import (
    BiasOptConfig,
    BiasReport,
    RateMcConfig,
    RateReport,
    bias_report,
    intermediate_bias,
    intermediate_rate,
    ms_bias,
    ms_rate,
    predictor_spectral_radius,
    rate_report,
    ss_bias,
    ss_rate,
)

__version__ = "0.1.0"
