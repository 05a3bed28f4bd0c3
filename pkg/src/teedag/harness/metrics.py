"""Per-run metrics: commit rates, candidate support, latency and leader histogram."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from ..core import round_of_wave
from .scenario import ScenarioResult

Z99 = 2.5758293035489004   # two-sided 99% normal quantile


def binomial_half_width(p: float, n: int, z: float = Z99) -> float:
    if n <= 0:
        raise ValueError("need at least one sample")
    return z * math.sqrt(max(p * (1 - p), 0.0) / n)


@dataclass
class MetricsRecord:
    scenario: str
    waves_evaluated: int
    txns_committed: int
    throughput_per_kilotick: float
    latency_ticks_mean: float | None
    latency_rounds_mean: float | None
    rounds_per_committed_leader: float | None
    committed_leaders: int
    per_wave_direct_commit: list[int] = field(default_factory=list)
    p_wave_commit_est: float = 0.0
    direct_commit_samples: int = 0
    p_u_est: float | None = None
    p_u_samples: int = 0
    leader_histogram: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _round(x: float | None) -> float | None:
    return None if x is None else round(x, 9)


def compute_metrics(res: ScenarioResult) -> MetricsRecord:
    cfg = res.cfg
    W = cfg.rounds_per_wave
    ref = res.reference
    outcomes = ref.ordering.outcomes
    waves = sorted(outcomes)
    bitmap = [int(outcomes[w].direct) for w in waves]

    flags = [int(oc.direct) for rep in res.correct for oc in rep.ordering.outcomes.values()]
    p_wave = sum(flags) / len(flags) if flags else 0.0

    hist = [0] * cfg.n
    for w in waves:
        hist[outcomes[w].leader] += 1

    dag = ref.dag
    hits = total = 0
    for w in waves:
        leader = dag.at(round_of_wave(w, 1, W), outcomes[w].leader)
        if leader is None:
            continue
        for x in dag.round(round_of_wave(w, W, W)):
            total += 1
            hits += dag.strong_path_exists(x, leader)

    leaders = len(ref.ordering.leader_commits)
    rpl = W * len(waves) / leaders if leaders else None

    lat_ticks = []
    lat_rounds = []
    for cl in res.clients:
        for d, t_ack in cl.ack_times.items():
            lat_ticks.append(t_ack - cl.submissions[d].time)
    for rep in res.correct:
        for d in rep.ingress_owner:
            info = rep.commit_info.get(d)
            if info is not None:
                lat_rounds.append(info[1] - info[2])

    committed = len(ref.commit_log)
    span = max(res.report.tick_span, 1)
    return MetricsRecord(
        scenario=cfg.label(),
        waves_evaluated=len(waves),
        txns_committed=committed,
        throughput_per_kilotick=_round(1000 * committed / span),
        latency_ticks_mean=_round(sum(lat_ticks) / len(lat_ticks)) if lat_ticks else None,
        latency_rounds_mean=_round(sum(lat_rounds) / len(lat_rounds)) if lat_rounds else None,
        rounds_per_committed_leader=_round(rpl),
        committed_leaders=leaders,
        per_wave_direct_commit=bitmap,
        p_wave_commit_est=_round(p_wave),
        direct_commit_samples=len(waves),
        p_u_est=_round(hits / total) if total else None,
        p_u_samples=total,
        leader_histogram=hist,
    )


def wave_records(res: ScenarioResult) -> list[dict]:
    """One JSON-ready record per evaluated wave."""
    out = []
    correct = res.correct
    waves = sorted(res.reference.ordering.outcomes)
    for w in waves:
        ref_oc = res.reference.ordering.outcomes[w]
        out.append({
            "type": "wave",
            "wave": w,
            "leader": ref_oc.leader,
            "leader_present": ref_oc.present,
            "supporters": ref_oc.supporters,
            "direct": {str(r.rid): int(r.ordering.outcomes[w].direct)
                       for r in correct if w in r.ordering.outcomes},
        })
    return out
