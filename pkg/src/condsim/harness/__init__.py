"""Experiments, configuration, reports and the command-line interface."""

from .config import RunConfig, DEFAULTS, SCHEMA_VERSION
from .experiments import (run_invariance_check, run_remark84, run_counterexample_lower,
                          run_counterexample_upper)
from .report import DiagnosticsReport, Table
from .stats import Estimate
