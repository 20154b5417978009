"""Experiment orchestration: configs, runs, metrics, reports and plots."""

from .config import ExperimentConfig, scaled_point_mass
from .metrics import COLUMNS, MetricsRow, read_csv, write_csv
from .report import MissingRuns, plot, report, summarize
from .runner import RunArtifacts, evaluate, evaluate_population, run, run_strategy

__all__ = [
    "COLUMNS",
    "ExperimentConfig",
    "MetricsRow",
    "MissingRuns",
    "RunArtifacts",
    "evaluate",
    "evaluate_population",
    "plot",
    "read_csv",
    "report",
    "run",
    "run_strategy",
    "scaled_point_mass",
    "summarize",
    "write_csv",
]
