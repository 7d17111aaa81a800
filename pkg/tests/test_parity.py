import os
import subprocess
import sys

import pytest

from pmprims import _core
from pmprims import nodes as nd
from pmprims._core import CArenaCore, PyArenaCore
from pmprims.oracle import run_equivalence
from pmprims.pstore import Arena

needs_c = pytest.mark.skipif(CArenaCore is None, reason="compiled core not built")


@needs_c
@pytest.mark.parametrize("layout", nd.LAYOUTS)
def test_equivalence_driver_leaves_identical_arenas(layout):
    out = []
    for core in (PyArenaCore, CArenaCore):
        arena = Arena(1 << 20, core_cls=core)
        report = run_equivalence(layout, 512, seed=2, steps=4000, arena=arena)
        out.append((arena.image(), arena.durable_image(), arena.counters(), report.counts))
    assert out[0] == out[1]


@needs_c
def test_bench_rows_identical_across_cores(monkeypatch):
    from pmprims.bench import ExperimentConfig, run
    from pmprims import pstore

    results = []
    for core in (PyArenaCore, CArenaCore):
        monkeypatch.setattr(pstore, "ArenaCore", core)
        rows = run(ExperimentConfig("E4", node_sizes=(512,), iterations=20,
                                    pool_size=1 << 18))
        results.append([r.as_strings()[:11] + r.as_strings()[13:] for r in rows])
    assert results[0] == results[1]


def _backend(env):
    code = "import pmprims; print(pmprims.BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                          text=True, check=True).stdout.strip()


def test_pure_python_fallback_is_selectable():
    env = dict(os.environ, PMPRIMS_PURE_PYTHON="1")
    assert _backend(env) == "python"


@needs_c
def test_compiled_core_is_default():
    env = {k: v for k, v in os.environ.items() if k != "PMPRIMS_PURE_PYTHON"}
    assert _backend(env) == "cython"
    assert _core.NodeKernel is not None
