"""Crash-point sweeps over single structural operations.

Each scenario prepares a small structure, records the operation's event
trace and then recovers from every crash point (or from seeded adversarial
crashes) to check the recovered state against the states before and after.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .. import nodes as nd
from .. import lsm
from ..oracle import dichotomy_violations, enumerate_crash_points, torn_words
from ..pstore import Arena, CrashPlan, PRef
from ..tree import BPlusTree

SCENARIOS = ("move", "merge", "insert")
ARENA_BYTES = 128 * 1024
MAX_EVENTS = 10_000


@dataclass
class CrashReport:
    scenario: str
    fa: str
    mode: str
    events: int = 0
    crash_points: int = 0
    violations: list = field(default_factory=list)
    torn_words: int = 0
    strategy: str = ""

    @property
    def ok(self) -> bool:
        return not self.violations and not self.torn_words

    def summary(self) -> str:
        label = f"{self.scenario}/{self.strategy}" if self.strategy else self.scenario
        verdict = "ok" if self.ok else "FAILED"
        return (f"{label} fa={self.fa} mode={self.mode}: {self.crash_points} crash points "
                f"over {self.events} events, {len(self.violations)} violations, "
                f"{self.torn_words} torn words -> {verdict}")


class _LsmCase:
    """Two-level LSM store with level 0 prepared for a move or a merge."""

    def __init__(self, scenario, fa, strategy, node_size, K, duplicates, seed):
        self.arena = Arena(ARENA_BYTES, log_size=32 * 1024)
        self.store = lsm.LsmStore(self.arena, runs_per_level=K, node_size=node_size,
                                  levels=2)
        rng = random.Random(seed)
        c0 = self.store.C0
        runs = K - 1 if scenario == "move" else K
        base = 0
        for r in range(runs):
            buf = lsm.DramBuffer(c0)
            for i in range(c0):
                key = (i if duplicates else base + i) * 3 + 1
                buf.insert(key, nd.pack_value(r, i, rng.random()))
            base += c0
            self.store.move_node(buf, lsm.NONE)
        self.buffer = lsm.DramBuffer(c0)
        for i in range(c0):
            self.buffer.insert(10_000 + i, nd.pack_value(99, i, 0.25))
        self.scenario, self.fa, self.strategy = scenario, fa, strategy

    def run(self):
        if self.scenario == "move":
            self.store.move_node(self.buffer, self.fa)
        else:
            self.store.merge(0, self.fa, strategy=self.strategy)

    def regions(self) -> list[PRef]:
        """Bytes the operation may change: head words and the target run."""
        store = self.store
        target = (store.run_ref(0, store.peek_head(0)) if self.scenario == "move"
                  else store.run_ref(1, store.peek_head(1)))
        return [self.arena.root.sub(lsm.HEADS_OFF, 8 * store.levels), target]

    def structure(self) -> list[PRef]:
        """Everything recovery reads; the merge scratch space is excluded."""
        store = self.store
        return [self.arena.root] + [ref for level in store._runs for ref in level]

    def state(self, arena: Arena):
        return lsm.LsmStore.recover(arena).levels_state()

    def check(self, old, new, recovered) -> list[str]:
        return dichotomy_violations(old, new, recovered)


class _InsertCase:
    """Insert into a non-full leaf of a tree with volatile inner nodes."""

    def __init__(self, fa, node_size, seed, layout=nd.HASHING):
        self.arena = Arena(ARENA_BYTES, log_size=32 * 1024)
        cap = nd.capacity(layout, node_size)
        rng = random.Random(seed)
        items = [(10 * i, nd.pack_value(i, 0, rng.random())) for i in range(1, 3 * cap)]
        self.tree = BPlusTree.build(self.arena, items, fill=0.75, leaf_layout=layout,
                                    node_size=node_size, fa=fa)
        self.key = 10 * rng.randrange(1, 3 * cap - 1) + 5
        self.value = nd.pack_value(7, 7, 0.5)
        leaf, _ = self.tree.traverse(self.key)
        self.leaf = leaf

    def run(self):
        self.tree.insert(self.key, self.value)

    def regions(self) -> list[PRef]:
        return [self.leaf.ref]

    def structure(self) -> list[PRef]:
        a = self.arena
        end = a.log_off + a.log_cap
        # the arena header line is bookkeeping, not tree state
        return [PRef(0, a.log_off), PRef(end, a.size - a.line_size - end)]

    def state(self, arena: Arena):
        return BPlusTree.recover(arena).items()

    def check(self, old, new, recovered) -> list[str]:
        if recovered in (old, new):
            return []
        return ["recovered tree holds neither the old nor the new contents"]


def _make_case(scenario, fa, strategy, node_size, K, duplicates, seed):
    if scenario == "insert":
        if fa not in (nd.INDIVIDUAL, nd.TX):
            raise ValueError("the insert scenario supports individual and tx only")
        return _InsertCase(fa, node_size, seed)
    return _LsmCase(scenario, fa, strategy, node_size, K, duplicates, seed)


def _region_bytes(image: bytes, regions) -> bytes:
    return b"".join(image[r.offset:r.offset + r.length] for r in regions)


def run_crashcheck(scenario: str, fa: str, *, adversarial: bool = False, seed: int = 0,
                   seeds: int = 100, strategy: str = lsm.TWO_WAY, node_size: int = 256,
                   runs_per_level: int = 4, duplicates: bool = True) -> CrashReport:
    """Sweep crash points of one operation and report every violation.

    Deterministic mode visits every event boundary; adversarial mode draws
    ``seeds`` crash points starting from ``seed`` and tears every unclean
    line word by word.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    lsm._check_fa(fa)
    case = _make_case(scenario, fa, strategy, node_size, runs_per_level, duplicates, seed)
    arena = case.arena
    regions = case.regions()
    old_image = arena.durable_image()
    old = case.state(Arena.from_image(old_image))
    arena.begin_trace()
    case.run()
    events = arena.events
    commit = next((i for i, kind in arena.trace_marks if kind == "tx_commit"), None)
    # the intended outcome is what a clean shutdown would keep, so a protocol
    # that never persists its data cannot pass as its own reference
    new_image = arena.image()
    new = case.state(Arena.from_image(new_image))
    report = CrashReport(scenario, fa, "adversarial" if adversarial else "deterministic",
                         events=len(events),
                         strategy=strategy if scenario == "merge" else "")
    if len(events) > MAX_EVENTS:
        raise ValueError(f"trace of {len(events)} events exceeds {MAX_EVENTS}")
    if adversarial:
        rng = random.Random(seed)
        plans = [CrashPlan(rng.randrange(len(events) + 1), "adversarial", seed + i)
                 for i in range(seeds)]
    else:
        plans = enumerate_crash_points(events, MAX_EVENTS, seed)
    old_regions = _region_bytes(old_image, regions)
    new_regions = _region_bytes(new_image, regions)
    structure = case.structure()
    old_struct = _region_bytes(old_image, structure)
    new_struct = _region_bytes(new_image, structure)
    for plan in plans:
        recovered_arena = Arena.from_image(arena.crash_image(plan))
        recovered_arena.recover()
        image = recovered_arena.durable_image()
        if adversarial:
            report.torn_words += len(torn_words(_region_bytes(image, regions),
                                                old_regions, new_regions))
        recovered = case.state(recovered_arena)
        where = f"crash point {plan.crash_point}"
        if fa == nd.TX:
            got = _region_bytes(image, structure)
            # the marker-clearing store, flush and fence close the transaction;
            # a crash among them may persist either outcome
            if commit is None or plan.crash_point <= commit - 3:
                if got != old_struct:
                    report.violations.append(f"{where}: rollback is not byte-exact")
            elif plan.crash_point >= commit:
                if got != new_struct or recovered != new:
                    report.violations.append(f"{where}: committed change lost")
            elif got not in (old_struct, new_struct):
                report.violations.append(f"{where}: commit left a mixed image")
            continue
        for problem in case.check(old, new, recovered):
            report.violations.append(f"{where}: {problem}")
    report.crash_points = len(plans)
    return report
