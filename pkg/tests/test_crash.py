import pytest

from pmprims import lsm
from pmprims.bench.crashcheck import run_crashcheck
from pmprims.lsm import LsmStore


@pytest.mark.parametrize("node_size", [256, 1024])
@pytest.mark.parametrize("fa", lsm.FA_STRATEGIES)
@pytest.mark.parametrize("scenario,strategy", [("move", lsm.TWO_WAY), ("merge", lsm.TWO_WAY),
                                               ("merge", lsm.K_WAY)])
def test_lsm_crash_sweep(scenario, strategy, fa, node_size):
    r = run_crashcheck(scenario, fa, strategy=strategy, node_size=node_size)
    assert r.ok, r.violations[:5]
    assert r.crash_points == r.events + 1


@pytest.mark.parametrize("fa", [lsm.TX, lsm.INDIVIDUAL])
def test_tree_insert_crash_sweep(fa):
    r = run_crashcheck("insert", fa)
    assert r.ok, r.violations[:5]


@pytest.mark.parametrize("scenario", ["move", "merge", "insert"])
@pytest.mark.parametrize("fa", lsm.FA_STRATEGIES)
def test_adversarial_sweep_has_no_torn_words(scenario, fa):
    if scenario == "insert" and fa == lsm.NONE:
        pytest.skip("tree inserts have no unlogged-publish mode")
    r = run_crashcheck(scenario, fa, adversarial=True, seeds=100, seed=7)
    assert r.crash_points == 100
    assert r.torn_words == 0 and r.ok, r.violations[:5]


@pytest.mark.parametrize("fa", [lsm.INDIVIDUAL, lsm.NONE])
def test_sweep_detects_unflushed_runs(monkeypatch, fa):
    write_run = LsmStore._write_run

    def lazy(self, ref, items, snapshot=None, flush=True):
        write_run(self, ref, items, snapshot, flush=False)

    monkeypatch.setattr(LsmStore, "_write_run", lazy)
    r = run_crashcheck("move", fa)
    assert not r.ok
    assert "violation" in r.summary() or r.violations


def test_unknown_scenario_rejected():
    with pytest.raises(ValueError):
        run_crashcheck("rotate", lsm.TX)
