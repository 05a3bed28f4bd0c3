"""Run artifacts: commit logs, DAG dumps and JSON-lines metrics.

Commit log line (tab separated)::

    sn  wave  round  source  vertex_digest_hex  tx_hex

DAG dump line: ``round source digest_hex wire_hex``, ascending (round, source).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from ..core import DagStore
from ..ordering import CommitRecord
from .metrics import MetricsRecord, compute_metrics, wave_records
from .scenario import ScenarioResult


def commit_log_text(records: Sequence[CommitRecord]) -> str:
    return "".join(rec.to_line() + "\n" for rec in records)


def dag_dump_text(dag: DagStore) -> str:
    lines = []
    for r in sorted(dag.rounds):
        for v in dag.round(r):
            lines.append(f"{v.round} {v.source} {v.digest.hex()} {v.wire.hex()}\n")
    return "".join(lines)


def metrics_lines(res: ScenarioResult, metrics: MetricsRecord | None = None) -> str:
    metrics = metrics or compute_metrics(res)
    out = [json.dumps(rec, sort_keys=True) for rec in wave_records(res)]
    summary = {"type": "summary", **metrics.to_dict(), "report": res.report.to_dict()}
    out.append(json.dumps(summary, sort_keys=True))
    return "\n".join(out) + "\n"


def write_run(res: ScenarioResult, out_dir: str | Path) -> dict[str, Path]:
    """Write every artifact of one run into ``out_dir``; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for rep in res.replicas:
        p = out / f"commits_r{rep.rid}.log"
        p.write_text(commit_log_text(rep.commit_log))
        paths[p.name] = p
        p = out / f"dag_r{rep.rid}.txt"
        p.write_text(dag_dump_text(rep.dag))
        paths[p.name] = p
    p = out / "metrics.jsonl"
    p.write_text(metrics_lines(res))
    paths[p.name] = p
    return paths


def diff_logs(a: Iterable[str], b: Iterable[str]) -> int | None:
    """First line index where two commit logs disagree on their common prefix."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None
