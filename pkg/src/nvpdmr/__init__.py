"""Simulation and calibration of optical and photoelectrical NV spin readout."""

from .model import (
    BinState,
    ConfigError,
    Mesh,
    OpticalPumping,
    RatePreset,
    RateSet,
    SimConfig,
    TransportParams,
    build_mesh,
    build_rate_set,
    default_mesh,
    get_preset,
    load_presets,
    preset_with_overrides,
    refined_mesh,
    validate_config,
)
from .dynamics import (
    IntegrationError,
    MeshState,
    OracleError,
    SteadyResult,
    Trajectory,
    assemble_rhs,
    drift_divergence,
    initial_state,
    initial_state_for,
    integrate,
    run_to_steady_state,
    single_bin_steady_oracle,
    steady_state_for,
)
from .observables import (
    Lifetimes,
    Observables,
    ObservableError,
    carrier_lifetimes,
    contrast,
    generation_rates,
    occupation_change,
    photocurrent_analytic,
    photocurrent_transport,
    photoluminescence,
    quantum_efficiencies,
    steady_observables,
)
from .calibration import (
    CURVE_KINDS,
    ExperimentalCurve,
    FitResult,
    NoDipError,
    NsEstimate,
    PeakEstimate,
    ResonanceFit,
    SweepPoint,
    SweepResult,
    estimate_ns_count,
    find_contrast_max,
    fit_rates,
    fit_resonance,
    kmw_sensitivity,
    load_curve,
    load_spectrum,
    power_sweep,
)

__version__ = "0.1.0"
