"""``bench`` command line: run experiments, build profiles, sweep crashes."""

from __future__ import annotations

import argparse
import logging
import sys

from .. import lsm
from ..lsm import LsmError
from ..nodes import NodeError
from ..pstore import ArenaError
from .crashcheck import SCENARIOS, run_crashcheck
from .experiments import run_cells
from .profile import build_profile, emit_profile
from .results import EXPERIMENTS, ExperimentConfig, LsmParams, emit_csv, read_csv

EXIT_OK, EXIT_ERROR, EXIT_ALL_SKIPPED = 0, 1, 2


def _names(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in _names(text))


def _bools(text: str) -> tuple:
    out = []
    for x in _names(text):
        if x.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise argparse.ArgumentTypeError(f"not a boolean: {x!r}")
        out.append(x.lower() in ("true", "1", "yes"))
    return tuple(out)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; exit code 2 is reserved for all-skipped runs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write its CSV")
    r.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    r.add_argument("--layouts", type=_names, default=None, help="comma-separated layouts")
    r.add_argument("--node-sizes", type=_ints, default=None, help="comma-separated bytes")
    r.add_argument("--positions", type=_names, default=None,
                   help="first,middle,last or numeric ranks")
    r.add_argument("--iterations", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--fa", type=_names, default=(), help="tx, individual, none")
    r.add_argument("--placement", choices=("volatile", "persistent"), default="volatile")
    r.add_argument("--algorithms", type=_names, default=(),
                   help="search algorithms (E1), iterate modes (E3), split strategies "
                        "(E5) or balance directions (E9)")
    r.add_argument("--depths", type=_ints, default=None, help="tree depths (E2)")
    r.add_argument("--pool-bytes", type=int, default=None)
    r.add_argument("--fill", type=float, default=1.0)
    r.add_argument("--runs-per-level", type=int, default=4, help="LSM K (E6, E7)")
    r.add_argument("--run-capacity", type=int, default=None, help="LSM C0 (E6, E7)")
    r.add_argument("--duplicates", type=_ints, default=(0, 100), help="E7: 0,100")
    r.add_argument("--via-dram", type=_bools, default=(False, True), help="E7: false,true")
    r.add_argument("--merge", type=_names, default=(lsm.TWO_WAY, lsm.K_WAY), help="E7")
    r.add_argument("--organizations", type=_names, default=lsm.ORGANIZATIONS, help="E6")
    r.add_argument("--out", required=True)

    f = sub.add_parser("profile", help="score layouts from result CSVs")
    f.add_argument("--in", dest="inputs", nargs="+", required=True)
    f.add_argument("--out", required=True)

    c = sub.add_parser("crashcheck", help="sweep crash points of one operation")
    c.add_argument("--scenario", required=True, choices=SCENARIOS)
    c.add_argument("--fa", required=True, choices=lsm.FA_STRATEGIES)
    c.add_argument("--merge", choices=(lsm.TWO_WAY, lsm.K_WAY), default=lsm.TWO_WAY)
    c.add_argument("--adversarial", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=100, help="adversarial crash count")
    return p


def _config(a) -> ExperimentConfig:
    kw = dict(id=a.experiment, iterations=a.iterations, seed=a.seed, fa=a.fa,
              placement=a.placement, algorithms=a.algorithms, fill=a.fill,
              lsm=LsmParams(K=a.runs_per_level, C=a.run_capacity,
                            duplicates=a.duplicates, via_dram=a.via_dram,
                            merge=a.merge, organizations=a.organizations))
    for name in ("layouts", "node_sizes", "positions", "depths"):
        value = getattr(a, name)
        if value is not None:
            kw[name] = value
    if a.pool_bytes is not None:
        kw["pool_size"] = a.pool_bytes
    return ExperimentConfig(**kw)


def _run(a) -> int:
    rows, skips = run_cells(_config(a))
    if not rows:
        print(f"all {len(skips)} cells skipped; nothing written", file=sys.stderr)
        return EXIT_ALL_SKIPPED
    emit_csv(rows, a.out)
    print(f"{a.experiment}: {len(rows)} rows -> {a.out} ({len(skips)} cells skipped)")
    return EXIT_OK


def _profile(a) -> int:
    rows = [row for path in a.inputs for row in read_csv(path)]
    scores = build_profile(rows)
    emit_profile(scores, a.out)
    print(f"profile of {len(scores)} layouts -> {a.out}")
    return EXIT_OK


def _crashcheck(a) -> int:
    report = run_crashcheck(a.scenario, a.fa, adversarial=a.adversarial, seed=a.seed,
                            seeds=a.seeds, strategy=a.merge)
    print(report.summary())
    for v in report.violations[:20]:
        print("  " + v)
    return EXIT_OK if report.ok else EXIT_ERROR


def main(argv=None) -> int:
    parser = _parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handler = {"run": _run, "profile": _profile, "crashcheck": _crashcheck}[a.command]
    try:
        return handler(a)
    except (ValueError, OSError, KeyError, ArenaError, LsmError, NodeError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
