"""Oracle checkers over commit logs, final DAGs and replica state."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from scipy.stats import chisquare

from ..core import DagStore, round_of_wave, verify_vertex
from ..ordering import CommitRecord


@dataclass(frozen=True)
class Verdict:
    ok: bool
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


PASS = Verdict(True)


def check_safety(logs: Mapping[int, Sequence[CommitRecord]]) -> Verdict:
    """Every pair of logs agrees on the common prefix."""
    lines = {rid: [rec.to_line() for rec in log] for rid, log in logs.items()}
    for a, b in combinations(sorted(lines), 2):
        la, lb = lines[a], lines[b]
        k = min(len(la), len(lb))
        for i in range(k):
            if la[i] != lb[i]:
                return Verdict(False, f"replicas {a} and {b} diverge at sn {i}")
    return PASS


def check_liveness(logs: Mapping[int, Sequence[CommitRecord]], submitted: Iterable[bytes]) -> Verdict:
    """Every obligated payload is committed in every given log."""
    want = list(submitted)
    for rid in sorted(logs):
        have = {rec.tx.payload for rec in logs[rid]}
        missing = [p for p in want if p not in have]
        if missing:
            return Verdict(False, f"replica {rid} misses {len(missing)} of {len(want)} transactions")
    return PASS


def check_wave_candidates(dag: DagStore, w: int, f: int, rounds_per_wave: int = 3) -> int:
    """Number of wave-w first-round vertices with >= f+1 strong supporters in its last round."""
    last = dag.round(round_of_wave(w, rounds_per_wave, rounds_per_wave))
    count = 0
    for u in dag.round(round_of_wave(w, 1, rounds_per_wave)):
        bit = dag.bit(u)
        if sum(1 for x in last if dag.strong_mask(x) & bit) >= f + 1:
            count += 1
    return count


def check_dag_convergence(dags: Mapping[int, DagStore]) -> Verdict:
    """Per-round digest sets agree across stores, ignoring rounds evicted anywhere."""
    if not dags:
        return PASS
    evicted = set().union(*(d.evicted_rounds for d in dags.values()))
    snaps = {rid: {r: s for r, s in d.snapshot().items() if r not in evicted}
             for rid, d in dags.items()}
    rids = sorted(snaps)
    base = snaps[rids[0]]
    for rid in rids[1:]:
        other = snaps[rid]
        if other != base:
            diff = sorted(r for r in set(base) | set(other) if base.get(r) != other.get(r))
            return Verdict(False, f"replicas {rids[0]} and {rid} differ in rounds {diff[:5]}")
    return PASS


def leader_fairness_chisq(histogram: Sequence[int]) -> float:
    """Chi-square goodness-of-fit p-value against the uniform leader distribution."""
    n = len(histogram)
    total = sum(histogram)
    if n < 2 or total < 5 * n:
        raise ValueError(f"insufficient samples for a fairness test: {total} draws over {n} replicas")
    return float(chisquare(list(histogram)).pvalue)


def check_rbc(replicas, verifier) -> Verdict:
    """No duplicate slot deliveries, no invalid deliveries, equal delivered sets."""
    for rep in replicas:
        dup = [s for s, c in rep.rbc.stats.slot_deliveries.items() if c > 1]
        if dup:
            return Verdict(False, f"replica {rep.rid} delivered slots twice: {dup[:3]}")
        for v in rep.dag.all_vertices():
            if not verify_vertex(v, verifier):
                return Verdict(False, f"replica {rep.rid} holds invalid vertex {v!r}")
    sets = {rep.rid: frozenset(rep.rbc.delivered) for rep in replicas}
    if len(set(sets.values())) > 1:
        rids = sorted(sets)
        for rid in rids[1:]:
            if sets[rid] != sets[rids[0]]:
                return Verdict(False, f"delivered sets differ between {rids[0]} and {rid}")
    return PASS


def check_leader_agreement(replicas) -> Verdict:
    """Equal coin outcome for every wave evaluated by two or more replicas."""
    seen: dict[int, tuple[int, int]] = {}
    for rep in replicas:
        for w, coin in rep.ordering.coins.items():
            prev = seen.get(w)
            if prev is None:
                seen[w] = (rep.rid, coin.leader)
            elif prev[1] != coin.leader:
                return Verdict(False, f"wave {w}: replica {prev[0]} elected {prev[1]}, "
                                      f"replica {rep.rid} elected {coin.leader}")
    return PASS


def check_leader_order(replicas) -> Verdict:
    """Committed leader waves strictly increase per replica and agree across replicas."""
    by_wave: dict[int, bytes] = {}
    for rep in replicas:
        waves = [lc.wave for lc in rep.ordering.leader_commits]
        if any(a >= b for a, b in zip(waves, waves[1:])):
            return Verdict(False, f"replica {rep.rid} commits leaders out of order")
        for lc in rep.ordering.leader_commits:
            if by_wave.setdefault(lc.wave, lc.digest) != lc.digest:
                return Verdict(False, f"wave {lc.wave} committed different leaders")
    longest = max((rep.ordering.leader_commits for rep in replicas), key=len, default=[])
    for rep in replicas:
        mine = [lc.digest for lc in rep.ordering.leader_commits]
        if mine != [lc.digest for lc in longest[:len(mine)]]:
            return Verdict(False, f"replica {rep.rid} leader sequence is not a prefix")
    return PASS


def check_leader_paths(dag: DagStore, direct_leaders: Sequence[bytes]) -> Verdict:
    """Each later directly committed leader strong-reaches every earlier one."""
    present = [d for d in direct_leaders if d in dag]
    for i, later in enumerate(present):
        mask = dag.strong_mask(later)
        for earlier in present[:i]:
            if not mask & dag.bit(earlier):
                return Verdict(False, f"no strong path {later.hex()[:8]} -> {earlier.hex()[:8]}")
    return PASS


def check_slot_uniqueness(dag: DagStore) -> Verdict:
    seen = set()
    for v in dag.all_vertices():
        slot = (v.round, v.source)
        if slot in seen:
            return Verdict(False, f"two vertices for round {v.round} source {v.source}")
        seen.add(slot)
    return PASS


def direct_leader_digests(replicas) -> list[bytes]:
    """Union of directly committed leaders across replicas, by ascending wave."""
    by_wave = {}
    for rep in replicas:
        for lc in rep.ordering.leader_commits:
            if lc.direct:
                by_wave[lc.wave] = lc.digest
    return [by_wave[w] for w in sorted(by_wave)]
