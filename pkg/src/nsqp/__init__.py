"""Pseudo-spectral action functional and quasipotential toolkit for
stochastic 2D incompressible flow on a periodic box.

The numerics API is re-exported here; the report-generating command line
lives in `nsqp.cli` (kept out of this namespace so importing the library
never pulls in matplotlib).
"""

from .action import (
    ActionBreakdown,
    action_and_field_grad,
    action_decomposition,
    action_value,
    path_residuals,
    residual_profile,
)
from .dynamics import (
    BlowUpError,
    IntegratorConfig,
    PathGrid,
    solve_deterministic,
    step_deterministic,
    step_stochastic,
)
from .exits import (
    ExitConfig,
    ExitStats,
    ScanResult,
    exit_rate_scan,
    exit_statistics,
    exit_time_expectation,
    exit_time_single,
    simulate_exit_times,
    truncation_mask,
)
from .quasipotential import (
    MinimizationReport,
    gamma_sweep,
    minimize_action,
    quasipotential_formula,
    reverse_flow_candidate,
)
from .spectral import (
    FourierField,
    NoiseOperator,
    SpectralGrid,
    bilinear_B,
    dense_advect_reference,
    field_from_mode_pairs,
    inner_h,
    leray_project,
    load_field,
    make_grid,
    make_noise,
    random_field,
    save_field,
    stokes_apply,
    trilinear_b,
)

__version__ = "0.1.0"

__all__ = [
    "ActionBreakdown",
    "BlowUpError",
    "ExitConfig",
    "ExitStats",
    "FourierField",
    "IntegratorConfig",
    "MinimizationReport",
    "NoiseOperator",
    "PathGrid",
    "ScanResult",
    "SpectralGrid",
    "action_and_field_grad",
    "action_decomposition",
    "action_value",
    "bilinear_B",
    "dense_advect_reference",
    "exit_rate_scan",
    "exit_statistics",
    "exit_time_expectation",
    "exit_time_single",
    "field_from_mode_pairs",
    "gamma_sweep",
    "inner_h",
    "leray_project",
    "load_field",
    "make_grid",
    "make_noise",
    "minimize_action",
    "path_residuals",
    "quasipotential_formula",
    "random_field",
    "residual_profile",
    "reverse_flow_candidate",
    "save_field",
    "simulate_exit_times",
    "solve_deterministic",
    "step_deterministic",
    "step_stochastic",
    "stokes_apply",
    "trilinear_b",
    "truncation_mask",
]
