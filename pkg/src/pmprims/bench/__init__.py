"""Benchmark harness: experiment runs, CSV output, profiles, crash sweeps."""

from .crashcheck import CrashReport, run_crashcheck
from .experiments import expand, run, run_cells
from .profile import AXES, MissingAxisError, ProfileScore, build_profile
from .results import (COLUMNS, EXPERIMENTS, ExperimentConfig, LsmParams, ResultRow,
                      emit_csv, read_csv)

__all__ = [
    "AXES", "COLUMNS", "EXPERIMENTS", "CrashReport", "ExperimentConfig", "LsmParams",
    "MissingAxisError", "ProfileScore", "ResultRow", "build_profile", "emit_csv", "expand",
    "read_csv", "run", "run_cells", "run_crashcheck",
]
