"""Time the compiled arena core against the pure-Python one.

Both cores run the same seeded node workload (search, then insert or erase)
for every layout.  The script reports microseconds per operation and checks
that final images and counters agree byte for byte.

    python3 benchmarks/compare_cores.py --ops 20000 --node-size 1024
"""

from __future__ import annotations

import argparse
import random
import sys
import time

from pmprims import nodes as nd
from pmprims._core import CArenaCore, PyArenaCore
from pmprims.oracle import run_equivalence
from pmprims.pstore import Arena


def node_workload(core_cls, layout, node_size, ops, seed):
    arena = Arena(1 << 20, core_cls=core_cls)
    node = nd.new_node(arena, layout, node_size)
    rng = random.Random(seed)
    space = 3 * node.capacity
    value = nd.pack_value(1, 2, 3.0)
    arena.reset_stats()
    t0 = time.perf_counter()
    for _ in range(ops):
        key = rng.randrange(space)
        r = node.search(key)
        if r.found:
            node.erase(key, pos=r, measure=False)
        elif node.peek_size() < node.capacity:
            node.insert(key, value, pos=r, measure=False)
    elapsed = time.perf_counter() - t0
    return elapsed, arena.image(), arena.counters()


def driver_workload(core_cls, layout, node_size, steps, seed):
    arena = Arena(1 << 22, core_cls=core_cls)
    t0 = time.perf_counter()
    run_equivalence(layout, node_size, seed, steps, arena=arena)
    return time.perf_counter() - t0, arena.image(), arena.counters()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ops", type=int, default=20_000)
    p.add_argument("--node-size", type=int, default=1024, choices=nd.NODE_SIZES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--driver", action="store_true",
                   help="time the layout-equivalence driver instead of one node")
    a = p.parse_args(argv)
    if CArenaCore is None:
        print("compiled core not built; run `pip install -e . --no-build-isolation`")
        return 1
    work = driver_workload if a.driver else node_workload
    print(f"{'layout':<12} {'python us/op':>13} {'cython us/op':>13} {'speedup':>8}  parity")
    ok = True
    for layout in nd.LAYOUTS:
        tp, img_p, cnt_p = work(PyArenaCore, layout, a.node_size, a.ops, a.seed)
        tc, img_c, cnt_c = work(CArenaCore, layout, a.node_size, a.ops, a.seed)
        same = img_p == img_c and cnt_p == cnt_c
        ok &= same
        print(f"{layout:<12} {tp / a.ops * 1e6:13.2f} {tc / a.ops * 1e6:13.2f} "
              f"{tp / tc:8.1f}x  {'same' if same else 'DIFFERENT'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
