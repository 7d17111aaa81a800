"""Experiment configuration, result rows and their CSV form."""

from __future__ import annotations

import csv
import os
from decimal import Decimal
from dataclasses import dataclass, field, fields
from fractions import Fraction

from .. import nodes as nd

EXPERIMENTS = tuple(f"E{i}" for i in range(1, 11))
POSITIONS = ("first", "middle", "last")

CACHE_ANALOG_BYTES = 13_750 * 1024 // 64
POOL_FACTOR = 16

PARAM_COLUMNS = ("position", "algorithm", "strategy", "fa", "placement", "depth",
                 "duplicates", "via_dram")
COUNTER_COLUMNS = ("modified_bytes", "written_bytes", "flushed_lines", "fences",
                   "lines_read", "allocations", "log_bytes")
COLUMNS = (("experiment", "layout", "node_size") + PARAM_COLUMNS
           + ("latency_ns_mean", "latency_ns_p50")
           + tuple(c + "_mean" for c in COUNTER_COLUMNS) + ("iterations", "seed"))
LATENCY_COLUMNS = ("latency_ns_mean", "latency_ns_p50")


@dataclass
class LsmParams:
    K: int = 4
    C: int | None = None
    duplicates: tuple = (0, 100)
    via_dram: tuple = (False, True)
    merge: tuple = ("2way", "kway")
    organizations: tuple = ("sorted_vector", "unsorted_hash")


@dataclass
class ExperimentConfig:
    """One ``bench run`` invocation.  Empty sweeps take per-experiment defaults."""

    id: str
    layouts: tuple = nd.LAYOUTS
    node_sizes: tuple = nd.NODE_SIZES
    positions: tuple = POSITIONS
    iterations: int = 1000
    pool_size: int = POOL_FACTOR * CACHE_ANALOG_BYTES
    seed: int = 0
    fa: tuple = ()
    placement: str = "volatile"
    algorithms: tuple = ()
    depths: tuple = (2, 3, 4)
    fill: float = 1.0
    lsm: LsmParams = field(default_factory=LsmParams)

    def __post_init__(self):
        if self.id not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.id!r}; expected one of E1..E10")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        for size in self.node_sizes:
            if size not in nd.NODE_SIZES:
                raise ValueError(f"node size {size} not in {nd.NODE_SIZES}")
        for layout in self.layouts:
            if layout not in nd.LAYOUTS:
                raise ValueError(f"unknown layout {layout!r}")
        for pos in self.positions:
            if pos not in POSITIONS and not str(pos).isdigit():
                raise ValueError(f"position {pos!r} is neither a name nor a rank")
        if not 0 < self.fill <= 1:
            raise ValueError("fill ratio must lie in (0, 1]")


def arena_bytes(needed: int) -> int:
    """Arena size for a cell, unless BENCH_ARENA_BYTES pins it."""
    pinned = os.environ.get("BENCH_ARENA_BYTES")
    if pinned:
        return int(pinned)
    return max(1 << 20, needed + (needed >> 2) + (256 << 10))


@dataclass
class ResultRow:
    experiment: str
    layout: str
    node_size: int
    position: str = ""
    algorithm: str = ""
    strategy: str = ""
    fa: str = ""
    placement: str = ""
    depth: str = ""
    duplicates: str = ""
    via_dram: str = ""
    latency_ns_mean: float = 0.0
    latency_ns_p50: float = 0.0
    modified_bytes_mean: Fraction = Fraction(0)
    written_bytes_mean: Fraction = Fraction(0)
    flushed_lines_mean: Fraction = Fraction(0)
    fences_mean: Fraction = Fraction(0)
    lines_read_mean: Fraction = Fraction(0)
    allocations_mean: Fraction = Fraction(0)
    log_bytes_mean: Fraction = Fraction(0)
    iterations: int = 0
    seed: int = 0

    def mean(self, counter: str) -> float:
        return float(getattr(self, counter + "_mean"))

    def as_strings(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in COLUMNS]

    @classmethod
    def from_strings(cls, rec: dict) -> "ResultRow":
        kw = {}
        for f in fields(cls):
            raw = rec[f.name]
            if f.name in ("node_size", "iterations", "seed"):
                kw[f.name] = int(raw)
            elif f.name in LATENCY_COLUMNS:
                kw[f.name] = float(raw)
            elif f.name.endswith("_mean"):
                kw[f.name] = Fraction(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, Fraction):
        if v.denominator == 1:
            return str(v.numerator)
        d = v.denominator
        for p in (2, 5):
            while d % p == 0:
                d //= p
        if d == 1:  # terminating: print exactly
            q = Decimal(v.numerator) / Decimal(v.denominator)
            return format(q.normalize(), "f")
        return f"{float(v):.9f}"
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def emit_csv(rows, path) -> None:
    """Write rows under the fixed column order; raises on an empty sequence."""
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow(row.as_strings())


def read_csv(path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [ResultRow.from_strings(rec) for rec in reader]
