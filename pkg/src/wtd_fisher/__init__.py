"""Waiting-time distributions, Fisher information and linear estimators for multi-channel photon counting."""

from .errors import (
    ComputationError,
    DegenerateInformation,
    ErgodicityError,
    GridMismatchError,
    ModelError,
    NonFiniteDerivative,
    StepSizeError,
    TailError,
)
from .estimator import GainTables, build_gains, crb_campaign, estimate
from .fisher import (
    FisherReport,
    ObserverMask,
    expected_interval_density,
    fisher_count_correction,
    fisher_poisson,
    fisher_total,
    sweep,
    total_count_sensitivity,
)
from .lindblad import (
    TauGrid,
    WtdTable,
    auto_grid,
    channel_count_stats,
    steady_state,
    waiting_time_distributions,
)
from .model import (
    DetectedChannel,
    OpenSystemModel,
    ParameterizedModel,
    UndetectedDissipator,
    build_lambda_system,
    build_two_level,
    lambda_family,
    load_model,
    render_model,
    two_level_family,
)
from .trajectory import DetectionRecord, IntervalHistogram, batch_simulate, simulate_record, sort_intervals

__version__ = "0.1.0"
