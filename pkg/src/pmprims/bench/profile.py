"""Per-layout performance profiles built from result rows."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from statistics import fmean

from .. import nodes as nd

AXES = ("search", "iterate", "insert", "erase", "split", "balance", "merge",
        "write_reduction", "memory")

# axis -> (experiments, counter, parameter minimised over within a group)
_AXIS_SOURCES = {
    "search": (("E1",), "lines_read", "algorithm"),
    "iterate": (("E3",), "lines_read", "strategy"),
    "insert": (("E4",), "modified_bytes", None),
    "erase": (("E8",), "modified_bytes", None),
    "split": (("E5",), "modified_bytes", "strategy"),
    "balance": (("E9",), "modified_bytes", None),
    "merge": (("E10",), "modified_bytes", None),
    "write_reduction": (("E4", "E8"), "written_bytes", None),
}


class MissingAxisError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileScore:
    primitive: str
    axes: dict

    def as_row(self) -> list[str]:
        return [self.primitive] + [f"{self.axes[a]:.6f}" for a in AXES]


def _usable(row) -> bool:
    # transactional node rows measure a different scheme; profiles use the default
    return row.fa in ("", nd.INDIVIDUAL)


def _axis_cost(rows, experiments, counter, minimise) -> float | None:
    groups = defaultdict(list)
    for r in rows:
        if r.experiment not in experiments or not _usable(r):
            continue
        key = (r.experiment, r.node_size, r.position, r.placement, r.depth,
               r.strategy if minimise != "strategy" else "",
               r.algorithm if minimise != "algorithm" else "")
        groups[key].append(r.mean(counter))
    if not groups:
        return None
    return fmean(min(v) for v in groups.values())


def _memory_cost(rows) -> float | None:
    sizes = sorted({r.node_size for r in rows})
    if not sizes:
        return None
    layout = rows[0].layout
    return fmean(size / nd.capacity(layout, size) for size in sizes)


def _score(best: float, observed: float) -> float:
    if observed == 0:
        return 1.0
    if best == 0:
        return 1.0 / (1.0 + observed)
    return best / observed


def build_profile(rows) -> list[ProfileScore]:
    """Normalised per-axis scores (best layout = 1.0) for every node layout
    present in ``rows``; raises :class:`MissingAxisError` on gaps."""
    by_layout = defaultdict(list)
    for r in rows:
        if r.layout in nd.LAYOUTS:
            by_layout[r.layout].append(r)
    if not by_layout:
        raise MissingAxisError("no node-layout rows to profile")
    costs: dict[str, dict[str, float]] = {}
    missing = {}
    for layout in nd.LAYOUTS:
        if layout not in by_layout:
            continue
        lrows = by_layout[layout]
        c = {axis: _axis_cost(lrows, *src) for axis, src in _AXIS_SOURCES.items()}
        c["memory"] = _memory_cost(lrows)
        gaps = [a for a in AXES if c[a] is None]
        if gaps:
            missing[layout] = gaps
        costs[layout] = c
    if missing:
        detail = "; ".join(f"{k}: {', '.join(v)}" for k, v in missing.items())
        raise MissingAxisError(f"rows do not cover every axis ({detail})")
    best = {a: min(c[a] for c in costs.values()) for a in AXES}
    return [ProfileScore(layout, {a: _score(best[a], c[a]) for a in AXES})
            for layout, c in costs.items()]


def emit_profile(scores, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("primitive",) + AXES)
        for s in scores:
            w.writerow(s.as_row())
