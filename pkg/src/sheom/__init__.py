"""Continuous weak measurement of open quantum systems with non-Markovian
environments: hierarchy-of-equations propagation, homodyne trajectory
unraveling, and detector-spectrum estimation."""

from .algebra import (
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    dissipator,
    eigendecompose,
    expectation,
    meas_superop,
)
from .bath import BathExpansion, BathSpec, choose_L, correlation_function, matsubara_expansion, terminator
from .dispersive import (
    DispersiveFrame,
    DriveSpec,
    bad_cavity_epsilon,
    build_X,
    build_frame,
    effective_observable,
    steady_alpha,
)
from .errors import (
    AllDivergedError,
    ConfigError,
    DimensionError,
    PoleError,
    ResonanceError,
    SheomError,
)
from .hierarchy import (
    HierarchyState,
    IndexSpace,
    enumerate_indices,
    full_heom_diffusion,
    full_heom_drift,
    initial_state,
    shem_diffusion,
    shem_drift,
    truncation_report,
)
from .measurement import (
    MeasurementConfig,
    SimulationModel,
    TrajectoryRecord,
    run_deterministic,
    run_trajectory,
)
from .sde import NoiseStream, SdeProblem, euler_maruyama_step, integrate, platen_step
from .spectroscopy import (
    EnsembleConfig,
    PeakMetrics,
    SpectrumResult,
    driven_qubit_model,
    ensemble_spectrum,
    peak_metrics,
    psd,
    weak_spectroscopy_experiment,
)
from .validation import (
    LindbladSpec,
    cross_check_elimination,
    lindblad_propagate,
    pure_dephasing_coherence,
    run_oracle_suite,
)

__version__ = "0.1.0"
