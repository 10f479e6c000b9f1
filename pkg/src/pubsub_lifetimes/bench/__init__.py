"""Latency benchmark harness: sweeps, exact percentiles, CSV reports."""

from .config import DESK, FULL, SweepConfig, parse_mode, sweep_configs
from .harness import E2E, METRICS, PUBLISH, RECEIVE, LatencySample, RunResult, check_capacity, probe_capacity, run_config
from .report import emit_report, read_raw
from .stats import Aggregate, Fit, aggregate, fit_points, percentile, pooled_percentile, scaling_fit

__all__ = [
    "DESK",
    "E2E",
    "METRICS",
    "FULL",
    "PUBLISH",
    "RECEIVE",
    "Aggregate",
    "Fit",
    "LatencySample",
    "RunResult",
    "SweepConfig",
    "aggregate",
    "check_capacity",
    "emit_report",
    "fit_points",
    "parse_mode",
    "percentile",
    "pooled_percentile",
    "probe_capacity",
    "read_raw",
    "run_config",
    "scaling_fit",
    "sweep_configs",
]
