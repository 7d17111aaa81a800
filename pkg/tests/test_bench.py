import csv
from fractions import Fraction

import pytest

from pmprims import lsm
from pmprims import nodes as nd
from pmprims.bench import (
    AXES, COLUMNS, ExperimentConfig, LsmParams, MissingAxisError, ResultRow, build_profile,
    emit_csv, read_csv, run, run_cells)
from pmprims.bench.cli import main
from pmprims.bench.results import LATENCY_COLUMNS, _fmt


def small(exp, **kw):
    kw.setdefault("iterations", 10)
    kw.setdefault("pool_size", 1 << 18)
    return ExperimentConfig(exp, **kw)


def test_e1_smoke_yields_one_row():
    rows = run(small("E1", layouts=("unsorted",), node_sizes=(256,), positions=("middle",)))
    assert len(rows) == 1
    r = rows[0]
    assert (r.experiment, r.layout, r.node_size, r.algorithm) == ("E1", "unsorted", 256, "linear")
    assert all(getattr(r, c + "_mean") >= 0 for c in ("modified_bytes", "lines_read", "fences"))
    assert r.lines_read_mean > 0 and r.modified_bytes_mean == 0


def test_e4_unsorted_is_position_independent():
    rows = run(small("E4", layouts=("unsorted",), node_sizes=(1024,),
                     positions=("first", "middle", "last")))
    assert len({r.modified_bytes_mean for r in rows}) == 1
    assert rows[0].modified_bytes_mean == 32


def test_e4_sorted_depends_on_position():
    rows = run(small("E4", layouts=("sorted",), node_sizes=(1024,)))
    by_pos = {r.position: r.modified_bytes_mean for r in rows}
    assert by_pos["first"] > by_pos["middle"] > by_pos["last"]


def test_e6_tx_logs_more_than_individual():
    rows = run(small("E6", node_sizes=(256, 1024)))
    for size in (256, 1024):
        log = {r.fa: r.log_bytes_mean for r in rows
               if r.node_size == size and r.layout == lsm.SORTED_VECTOR}
        assert log[lsm.TX] > log[lsm.INDIVIDUAL] > log[lsm.NONE] == 0


def test_invalid_cells_are_skipped_with_reason(caplog):
    rows, skips = run_cells(small("E1", layouts=("sorted",), node_sizes=(256,),
                                  positions=("first",), algorithms=("hash_probe",)))
    assert rows == [] and len(skips) == 1
    assert "hash_probe" in skips[0].reason
    assert "skipped" in caplog.text


@pytest.mark.parametrize("bad", [dict(id="E11"), dict(id="E1", iterations=0),
                                 dict(id="E1", node_sizes=(300,)),
                                 dict(id="E1", layouts=("heap",)),
                                 dict(id="E1", positions=("end",)),
                                 dict(id="E1", fill=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad)


def test_every_experiment_runs_at_desk_scale():
    for exp in ("E1", "E2", "E3", "E4", "E5", "E6", "E7", "E8", "E9", "E10"):
        rows = run(small(exp, node_sizes=(256,), depths=(2,)))
        assert rows, exp
        assert all(r.iterations == 10 for r in rows)


def test_csv_one_row_is_two_lines(tmp_path):
    rows = run(small("E1", layouts=("unsorted",), node_sizes=(256,), positions=("first",)))
    path = tmp_path / "e1.csv"
    emit_csv(rows, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split(",") == list(COLUMNS)
    assert read_csv(path) == rows


def test_csv_refuses_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_csv([], tmp_path / "x.csv")


def test_csv_missing_columns_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("experiment,layout\nE1,sorted\n")
    with pytest.raises(ValueError):
        read_csv(path)


@pytest.mark.parametrize("value,text", [(Fraction(7), "7"), (Fraction(5, 2), "2.5"),
                                        (Fraction(1, 3), "0.333333333"),
                                        (Fraction(3, 80), "0.0375"), (12.345, "12.3")])
def test_number_formatting(value, text):
    assert _fmt(value) == text


def _masked(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: v for k, v in r.items() if k not in LATENCY_COLUMNS} for r in rows]


def test_same_seed_gives_identical_counters(tmp_path):
    for i in (1, 2):
        emit_csv(run(small("E5", node_sizes=(256, 512), seed=3)), tmp_path / f"{i}.csv")
    assert _masked(tmp_path / "1.csv") == _masked(tmp_path / "2.csv")


def test_arena_size_override(monkeypatch):
    monkeypatch.setenv("BENCH_ARENA_BYTES", str(1 << 12))
    with pytest.raises(Exception):
        run(small("E4", layouts=("sorted",), node_sizes=(4096,), positions=("first",)))


def _profile_rows(**kw):
    rows = []
    for exp in ("E1", "E3", "E4", "E5", "E8", "E9", "E10"):
        rows += run(small(exp, node_sizes=(256, 1024), **kw))
    return rows


@pytest.fixture(scope="module")
def profile_rows():
    return _profile_rows()


def test_profile_scores(profile_rows):
    scores = {p.primitive: p.axes for p in build_profile(profile_rows)}
    assert set(scores) == set(nd.LAYOUTS)
    for axes in scores.values():
        assert set(axes) == set(AXES)
        assert all(0 < v <= 1 for v in axes.values())
    for axis in AXES:
        assert max(s[axis] for s in scores.values()) == 1.0
    assert scores["sorted"]["memory"] == scores["unsorted"]["memory"] == 1.0
    assert scores["hashing"]["memory"] < 1.0
    assert scores["bitmap"]["erase"] == 1.0
    assert scores["hashing"]["search"] == 1.0


def test_profile_missing_axis(profile_rows):
    with pytest.raises(MissingAxisError):
        build_profile([r for r in profile_rows if r.experiment != "E9"])
    with pytest.raises(MissingAxisError):
        build_profile([])


# -- command line -------------------------------------------------------------

def test_cli_run_and_profile(tmp_path, capsys):
    outs = []
    for exp in ("E1", "E3", "E4", "E5", "E8", "E9", "E10"):
        out = tmp_path / f"{exp}.csv"
        assert main(["run", "--experiment", exp, "--node-sizes", "256",
                     "--iterations", "5", "--pool-bytes", str(1 << 18),
                     "--out", str(out)]) == 0
        outs.append(str(out))
    prof = tmp_path / "profile.csv"
    assert main(["profile", "--in", *outs, "--out", str(prof)]) == 0
    lines = prof.read_text().splitlines()
    assert lines[0] == "primitive," + ",".join(AXES)
    assert len(lines) == 1 + len(nd.LAYOUTS)


def test_cli_lsm_options(tmp_path):
    out = tmp_path / "e7.csv"
    assert main(["run", "--experiment", "E7", "--node-sizes", "256", "--iterations", "3",
                 "--duplicates", "100", "--via-dram", "false", "--merge", "2way,kway",
                 "--fa", "tx", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert {r.strategy for r in rows} == {"2way", "kway"}
    assert {(r.duplicates, r.via_dram, r.fa) for r in rows} == {("100", "false", "tx")}


def test_cli_all_skipped_exits_2(tmp_path):
    out = tmp_path / "none.csv"
    assert main(["run", "--experiment", "E5", "--layouts", "sorted", "--node-sizes", "256",
                 "--algorithms", "copy", "--iterations", "2", "--out", str(out)]) == 2
    assert not out.exists()


@pytest.mark.parametrize("argv", [
    ["run", "--experiment", "E99", "--out", "x.csv"],
    ["run", "--experiment", "E1", "--node-sizes", "300", "--out", "x.csv"],
    ["run", "--experiment", "E1", "--via-dram", "maybe", "--out", "x.csv"],
    ["profile", "--in", "does-not-exist.csv", "--out", "p.csv"],
    ["bogus"],
])
def test_cli_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        raise SystemExit(main(argv))
    assert exc.value.code == 1


def test_cli_profile_gap_exits_1(tmp_path):
    out = tmp_path / "e1.csv"
    assert main(["run", "--experiment", "E1", "--node-sizes", "256", "--iterations", "2",
                 "--out", str(out)]) == 0
    assert main(["profile", "--in", str(out), "--out", str(tmp_path / "p.csv")]) == 1


def test_cli_arena_override_exits_1(tmp_path, monkeypatch):
    monkeypatch.setenv("BENCH_ARENA_BYTES", "4096")
    assert main(["run", "--experiment", "E4", "--node-sizes", "4096", "--iterations", "2",
                 "--out", str(tmp_path / "x.csv")]) == 1


def test_cli_crashcheck(capsys):
    assert main(["crashcheck", "--scenario", "merge", "--fa", "none", "--merge", "kway"]) == 0
    assert "0 violations" in capsys.readouterr().out
    assert main(["crashcheck", "--scenario", "move", "--fa", "tx", "--adversarial",
                 "--seeds", "20"]) == 0
