"""Time-varying dynamic watermarking for generalized replay attack detection."""

from . import _backend
from .attack import AttackConfig, attack_power, attack_signal, replay_preset
from .detector import (
    DetectorConfig,
    NormalizationSchedule,
    WindowStatistic,
    analytic_normalization,
    asymptotic_statistics,
    calibrate_threshold,
    estimate_normalization_ensemble,
    lti_baseline_normalization,
    normalization_factor,
    propagate_error_covariance,
    push_and_score,
    score_trace,
)
from .synthesis import (
    AssumptionReport,
    CarParams,
    build_car_scenario,
    compute_kprime,
    discretize_zoh,
    linearize_unicycle,
    lqr_gains,
    observer_gains,
    verify_assumptions,
)
from .system import (
    DetectionTrace,
    GainSchedule,
    NoiseSchedule,
    Scenario,
    SimulationState,
    StateSpaceSchedule,
    simulate,
    step,
)

__version__ = "0.1.0"
backend = _backend.default_name()
