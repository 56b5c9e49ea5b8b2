"""Conformal upper bounds on post-contingency line loadings for N-k screening."""

__version__ = "0.1.0"

from .conformal import (BoundMethod, CalibrationTable, KcpConfig, KernelConformal, StratifiedConformal,
                        build_table, kcp_quantile, scp_quantile, weighted_quantile)
from .grid_model import GridCase, load_case, parse_case
from .powerflow import ACOptions, solve_ac, solve_dc
from .scenario import Scenario, ScenarioEmbedder, ScenarioSpec, generate_scenarios, label

__all__ = [
    "ACOptions", "BoundMethod", "CalibrationTable", "GridCase", "KcpConfig", "KernelConformal",
    "Scenario", "ScenarioEmbedder", "ScenarioSpec", "StratifiedConformal", "build_table",
    "generate_scenarios", "kcp_quantile", "label", "load_case", "parse_case", "scp_quantile",
    "solve_ac", "solve_dc", "weighted_quantile",
]
