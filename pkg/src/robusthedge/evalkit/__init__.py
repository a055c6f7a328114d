"""Out-of-sample tests, scenario construction and the PDE benchmark."""

from .oosp import OospReport, PooledGenerator, forward_test, oosp, train_test_hedge
from .pde import HmsComparison, PdeGrid, compare_to_hms, hms_pde_solve, observed_order
from .scenarios import (
    ScenarioSet,
    ar1_daily_params,
    build_bs_scenarios,
    build_heston_scenarios,
    inverse_calibrate_bs,
    parameter_distance,
)

__all__ = [
    "OospReport",
    "PooledGenerator",
    "forward_test",
    "oosp",
    "train_test_hedge",
    "HmsComparison",
    "PdeGrid",
    "compare_to_hms",
    "hms_pde_solve",
    "observed_order",
    "ScenarioSet",
    "ar1_daily_params",
    "build_bs_scenarios",
    "build_heston_scenarios",
    "inverse_calibrate_bs",
    "parameter_distance",
]
