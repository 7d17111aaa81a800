"""Persistent-memory data structure primitives on a simulated arena."""

from ._core import BACKEND
from .pstore import Arena, CrashPlan, PRef, WriteStats

__all__ = ["Arena", "CrashPlan", "PRef", "WriteStats", "BACKEND"]
__version__ = "0.1.0"
