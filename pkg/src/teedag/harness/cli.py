"""Command line entry point: run, suite, analytic, diff-logs."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..ordering import analytic_wave_commit_probability
from .dumps import diff_logs, write_run
from .scenario import ScenarioConfig, parse_faults, run_scenario


def _gc(value: str) -> int | None:
    return None if value in ("off", "inf", "none") else int(value)


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--f", type=int, default=1)
    p.add_argument("--waves", type=int, default=10)
    p.add_argument("--wave-rounds", type=int, default=3, choices=(2, 3))
    p.add_argument("--delay", default="fixed:5",
                   help="fixed:N | uniform:LO:HI | adversarial:POLICY")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", default="",
                   help="comma separated NAME[@TICK][xCOUNT], e.g. crash@100xf,withhold")
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--txns", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--encrypt", action="store_true")
    p.add_argument("--gc", type=_gc, default=None, help="GC horizon in rounds, or 'off'")
    p.add_argument("--strict-queue", action="store_true")
    p.add_argument("--wave-trigger", choices=("literal", "early"), default="literal")
    p.add_argument("--out", type=Path, default=None)


def _cmd_run(args) -> int:
    from .suite import evaluate

    cfg = ScenarioConfig(
        f=args.f, waves=args.waves, rounds_per_wave=args.wave_rounds, delay=args.delay,
        seed=args.seed, faults=parse_faults(args.fault, args.f), clients=args.clients,
        txns=args.txns, batch=args.batch, encrypt=args.encrypt, gc=args.gc,
        strict_queue=args.strict_queue, wave_trigger=args.wave_trigger,
        kind="counterexample" if args.wave_rounds == 2 else "normal")
    res = run_scenario(cfg)
    chk = evaluate(res)
    if args.out is not None:
        write_run(res, args.out)
    verdicts = {k: v.ok for k, v in chk.verdicts.items()}
    m = chk.metrics
    print(json.dumps({
        "scenario": cfg.label(),
        "verdicts": verdicts,
        "min_candidates": chk.min_candidates,
        "p_wave_commit_est": m.p_wave_commit_est,
        "p_u_est": m.p_u_est,
        "rounds_per_committed_leader": m.rounds_per_committed_leader,
        "txns_committed": m.txns_committed,
        "report": res.report.to_dict(),
    }, sort_keys=True))
    return 0 if all(verdicts.values()) else 1


def _cmd_suite(args) -> int:
    from .suite import Suite, run_acceptance

    results = run_acceptance(Suite(seed=args.seed))
    for r in results:
        print(r.line())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "acceptance.json").write_text(json.dumps(
            [{"criterion": r.cid, "title": r.title, "passed": r.passed, "detail": r.detail}
             for r in results], indent=2) + "\n")
    return 0 if all(r.passed for r in results) else 1


def _cmd_analytic(args) -> int:
    print("f\tp_u\tP")
    for f in range(1, args.max_f + 1):
        p_u, big_p = analytic_wave_commit_probability(f)
        print(f"{f}\t{float(p_u):.6f}\t{float(big_p):.6f}")
    return 0


def _cmd_diff_logs(args) -> int:
    a = args.a.read_text().splitlines()
    b = args.b.read_text().splitlines()
    idx = diff_logs(a, b)
    if idx is not None:
        print(f"diverge at line {idx}:\n< {a[idx]}\n> {b[idx]}")
        return 1
    if len(a) != len(b):
        print(f"prefix-consistent; lengths {len(a)} and {len(b)}")
    else:
        print(f"identical ({len(a)} records)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teedag")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run one scenario")
    _add_run_args(run)
    run.set_defaults(fn=_cmd_run)
    suite = sub.add_parser("suite", help="run every acceptance criterion")
    suite.add_argument("--seed", type=int, default=None)
    suite.add_argument("--out", type=Path, default=None)
    suite.set_defaults(fn=_cmd_suite)
    ana = sub.add_parser("analytic", help="print the exact wave-commit probabilities")
    ana.add_argument("--max-f", type=int, default=10)
    ana.set_defaults(fn=_cmd_analytic)
    diff = sub.add_parser("diff-logs", help="compare two commit-log files")
    diff.add_argument("a", type=Path)
    diff.add_argument("b", type=Path)
    diff.set_defaults(fn=_cmd_diff_logs)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "suite" and args.seed is None:
        from .suite import MASTER_SEED
        args.seed = MASTER_SEED
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
