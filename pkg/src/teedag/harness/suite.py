"""Scenario matrix and executable acceptance criteria."""
from __future__ import annotations

import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

from scipy.stats import norm

from ..core import round_of_wave
from ..ordering import analytic_wave_commit_probability
from ..replica import TAMPER_MARK
from ..trusted import CoinRefused, RoundCertificate
from . import checks
from .dumps import write_run
from .metrics import MetricsRecord, binomial_half_width, compute_metrics
from .scenario import ScenarioConfig, ScenarioResult, parse_faults, run_scenario

log = logging.getLogger(__name__)

MASTER_SEED = 20240917
MATRIX_DELAYS = ("fixed:5", "uniform:1:100", "adversarial:starve-rotating-minority")
MATRIX_FAULTS = ("none", "crash@100xf", "withholdxf", "equivocate_attemptxf", "vote_starved_leaderxf")
EXTRA_FAULTS = ("invalid_attestationxf", "max_delayxf")
POLICIES = ("starve-rotating-minority", "split-first-round")

MATRIX_WAVES = 30
RANDOM_WAVES = 3000
ADVERSARIAL_WAVES = 1000
COUNTEREXAMPLE_WAVES = 200
MATRIX_BUDGET_S = 300.0


def matrix_configs(seed: int = MASTER_SEED, waves: int = MATRIX_WAVES) -> list[ScenarioConfig]:
    cfgs = []
    i = 0
    for f in (1, 2, 3):
        for delay in MATRIX_DELAYS:
            for faults in MATRIX_FAULTS:
                cfgs.append(ScenarioConfig(f=f, waves=waves, delay=delay, seed=seed + i,
                                           faults=parse_faults(faults, f), encrypt=True))
                i += 1
        for faults in EXTRA_FAULTS:
            cfgs.append(ScenarioConfig(f=f, waves=waves, delay="uniform:1:100", seed=seed + i,
                                       faults=parse_faults(faults, f)))
            i += 1
    return cfgs


@dataclass
class ScenarioCheck:
    label: str
    verdicts: dict[str, checks.Verdict]
    min_candidates: int | None
    candidate_waves: int
    metrics: MetricsRecord
    seconds: float

    def ok(self, *names: str) -> bool:
        return all(self.verdicts[n].ok for n in names)

    def failures(self, *names: str) -> list[str]:
        return [f"{self.label}: {n}: {self.verdicts[n].detail}"
                for n in names if not self.verdicts[n].ok]


def candidate_counts(res: ScenarioResult) -> list[int]:
    cfg = res.cfg
    counts = []
    for rep in res.correct:
        top = rep.dag.max_round()
        for w in range(1, cfg.waves + 1):
            if round_of_wave(w, cfg.rounds_per_wave, cfg.rounds_per_wave) > top:
                break
            if round_of_wave(w, 1, cfg.rounds_per_wave) in rep.dag.evicted_rounds:
                continue
            counts.append(checks.check_wave_candidates(rep.dag, w, cfg.f, cfg.rounds_per_wave))
    return counts


def evaluate(res: ScenarioResult, seconds: float = 0.0) -> ScenarioCheck:
    correct = res.correct
    v: dict[str, checks.Verdict] = {}
    v["quiescent"] = checks.Verdict(res.report.quiescent, "event budget exhausted")
    v["safety"] = checks.check_safety(res.correct_logs)
    v["convergence"] = checks.check_dag_convergence({r.rid: r.dag for r in correct})
    v["liveness"] = checks.check_liveness(res.correct_logs, res.obligations)
    v["rbc"] = checks.check_rbc(correct, res.replicas[0].rbc.verifier)
    v["leaders"] = checks.check_leader_agreement(correct)
    v["leader_order"] = checks.check_leader_order(correct)
    v["leader_paths"] = checks.check_leader_paths(correct[0].dag, checks.direct_leader_digests(correct))
    slots = [checks.check_slot_uniqueness(r.dag) for r in correct]
    tampered = [x for r in correct for x in r.dag.all_vertices()
                if any(t.payload.startswith(TAMPER_MARK) for t in x.block.txns)]
    v["containment"] = next((s for s in slots if not s.ok), None) or checks.Verdict(
        not tampered, f"{len(tampered)} tampered vertices inserted")
    if res.probe is not None:
        v["taint"] = checks.Verdict(res.probe.clean, f"{len(res.probe.violations)} plaintext leaks")
    counts = candidate_counts(res) if res.cfg.rounds_per_wave == 3 else []
    return ScenarioCheck(res.cfg.label(), v, min(counts) if counts else None, len(counts),
                         compute_metrics(res), seconds)


@dataclass
class CriterionResult:
    cid: int
    title: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.cid:2d}: {'PASS' if self.passed else 'FAIL'} - {self.title} - {self.detail}"


def _timed(cfg: ScenarioConfig) -> tuple[ScenarioResult, float]:
    t0 = time.perf_counter()
    res = run_scenario(cfg)
    return res, time.perf_counter() - t0


@dataclass
class Suite:
    seed: int = MASTER_SEED
    matrix_waves: int = MATRIX_WAVES
    random_waves: int = RANDOM_WAVES
    adversarial_waves: int = ADVERSARIAL_WAVES
    counterexample_waves: int = COUNTEREXAMPLE_WAVES
    matrix_seconds: float = field(default=0.0, init=False)

    @cached_property
    def matrix(self) -> list[tuple[ScenarioResult, ScenarioCheck]]:
        out = []
        t0 = time.perf_counter()
        for cfg in matrix_configs(self.seed, self.matrix_waves):
            res, dt = _timed(cfg)
            out.append((res, evaluate(res, dt)))
        self.matrix_seconds = time.perf_counter() - t0
        return out

    @cached_property
    def random_delay(self) -> tuple[ScenarioResult, ScenarioCheck]:
        cfg = ScenarioConfig(f=1, waves=self.random_waves, delay="uniform:1:100",
                             seed=self.seed + 1000, name="random-delay")
        res, dt = _timed(cfg)
        return res, evaluate(res, dt)

    @cached_property
    def adversarial(self) -> tuple[ScenarioResult, ScenarioCheck]:
        cfg = ScenarioConfig(f=1, waves=self.adversarial_waves,
                             delay="adversarial:starve-rotating-minority",
                             seed=self.seed + 2000, name="adversarial")
        res, dt = _timed(cfg)
        return res, evaluate(res, dt)

    @cached_property
    def counterexample(self) -> dict[tuple[int, str], tuple[ScenarioResult, ScenarioCheck]]:
        out = {}
        for W in (2, 3):
            for policy in POLICIES:
                cfg = ScenarioConfig(f=1, waves=self.counterexample_waves, rounds_per_wave=W,
                                     delay=f"adversarial:{policy}", seed=self.seed + 3000 + W,
                                     kind="counterexample", name=f"W{W}-{policy}")
                res, dt = _timed(cfg)
                out[(W, policy)] = (res, evaluate(res, dt))
        return out

    def all_runs(self) -> list[tuple[ScenarioResult, ScenarioCheck]]:
        return [*self.matrix, self.random_delay, self.adversarial, *self.counterexample.values()]


def _collect(pairs, *names: str) -> list[str]:
    out = []
    for _, chk in pairs:
        out.extend(chk.failures(*names))
    return out


def criterion_1(s: Suite) -> CriterionResult:
    fails = _collect(s.matrix, "quiescent", "safety", "convergence", "leader_order", "leader_paths")
    within = s.matrix_seconds < MATRIX_BUDGET_S
    ok = not fails and within
    detail = (f"{len(s.matrix)} scenarios, matrix wall time {s.matrix_seconds:.1f}s "
              f"(budget {MATRIX_BUDGET_S:.0f}s)")
    if fails:
        detail += "; " + "; ".join(fails[:3])
    return CriterionResult(1, "safety and DAG convergence matrix", ok, detail)


def criterion_2(s: Suite) -> CriterionResult:
    fails = _collect(s.matrix, "quiescent", "liveness")
    obligations = sum(len(res.obligations) for res, _ in s.matrix)
    detail = f"{obligations} obligated transactions over {len(s.matrix)} scenarios"
    if fails:
        detail += "; " + "; ".join(fails[:3])
    return CriterionResult(2, "liveness matrix", not fails, detail)


def criterion_3(s: Suite) -> CriterionResult:
    _, chk = s.random_delay
    m = chk.metrics
    p_u, big_p = (float(x) for x in analytic_wave_commit_probability(1))
    n_w = m.direct_commit_samples
    hw_p = binomial_half_width(big_p, n_w)
    hw_u = binomial_half_width(p_u, m.p_u_samples)
    rate_ok = m.p_wave_commit_est >= big_p - hw_p
    pu_ok = m.p_u_est is not None and abs(m.p_u_est - p_u) <= hw_u
    rpl_ok = m.rounds_per_committed_leader is not None and m.rounds_per_committed_leader <= 3.3
    detail = (f"direct-commit fraction {m.p_wave_commit_est:.4f} vs >= {big_p - hw_p:.4f} "
              f"({'ok' if rate_ok else 'low'}); p_u_est {m.p_u_est:.4f} vs {p_u:.4f}±{hw_u:.4f} "
              f"({'ok' if pu_ok else 'outside'}); rounds/leader {m.rounds_per_committed_leader:.3f} "
              f"vs <= 3.3 ({'ok' if rpl_ok else 'high'}); {n_w} waves")
    return CriterionResult(3, "random-delay commit rate", rate_ok and pu_ok and rpl_ok, detail)


def criterion_4(s: Suite) -> CriterionResult:
    _, chk = s.adversarial
    m = chk.metrics
    hw = binomial_half_width(0.5, m.direct_commit_samples)
    rate_ok = m.p_wave_commit_est >= 0.5 - hw
    rpl_ok = m.rounds_per_committed_leader is not None and m.rounds_per_committed_leader <= 6.5
    detail = (f"direct-commit fraction {m.p_wave_commit_est:.4f} vs >= {0.5 - hw:.4f}; "
              f"rounds/leader {m.rounds_per_committed_leader} vs <= 6.5; "
              f"{m.direct_commit_samples} waves")
    return CriterionResult(4, "adversarial commit rate", rate_ok and rpl_ok, detail)


def criterion_5(s: Suite) -> CriterionResult:
    waves = 0
    worst = None
    bad = []
    for res, chk in s.all_runs():
        if res.cfg.rounds_per_wave != 3:
            continue
        waves += chk.candidate_waves
        if chk.min_candidates is not None:
            worst = chk.min_candidates if worst is None else min(worst, chk.min_candidates)
            if chk.min_candidates < res.cfg.f + 1:
                bad.append(chk.label)
    detail = f"{waves} (replica, wave) evaluations, minimum candidate count {worst}"
    if bad:
        detail += "; below f+1 in " + ", ".join(bad[:3])
    w2 = [c for (W, _), (res, _) in s.counterexample.items() if W == 2
          for c in candidate_counts(res)]
    detail += f"; two-round waves (recorded only) minimum {min(w2) if w2 else 'n/a'}"
    return CriterionResult(5, "first-round candidate count", not bad and waves > 0, detail)


def two_proportion_p(x1: int, n1: int, x2: int, n2: int) -> float:
    """One-sided p-value for H1: rate1 < rate2 (pooled z-test)."""
    p = (x1 + x2) / (n1 + n2)
    se = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if se == 0:
        return 1.0 if x1 / n1 >= x2 / n2 else 0.0
    return float(norm.sf((x2 / n2 - x1 / n1) / se))


def criterion_6(s: Suite) -> CriterionResult:
    rates = {}
    for (W, policy), (_, chk) in s.counterexample.items():
        bitmap = chk.metrics.per_wave_direct_commit
        rates[(W, policy)] = (sum(bitmap), len(bitmap))
    # Each wave length faces the adversary that hurts it most.
    worst = {W: min((rates[(W, pol)] for pol in POLICIES), key=lambda t: t[0] / t[1])
             for W in (2, 3)}
    (x2, n2), (x3, n3) = worst[2], worst[3]
    p = two_proportion_p(x2, n2, x3, n3)
    same = []
    for pol in POLICIES:
        (a, na), (b, nb) = rates[(2, pol)], rates[(3, pol)]
        same.append(f"{pol} W2 {a}/{na} vs W3 {b}/{nb} p={two_proportion_p(a, na, b, nb):.2e}")
    detail = (f"worst-policy W=2 {x2}/{n2} = {x2 / n2:.3f} vs W=3 {x3}/{n3} = {x3 / n3:.3f}, "
              f"one-sided p = {p:.2e}; same-policy: " + "; ".join(same))
    return CriterionResult(6, "two-round waves commit less", p < 0.01, detail)


def coin_refusal_probe(res: ScenarioResult) -> tuple[int, int]:
    """Bad coin requests against a finished run's enclaves: (refused, attempted)."""
    W = res.cfg.rounds_per_wave
    refused = attempted = 0
    for rep in res.correct:
        certs = rep.engine.round_certs
        other = next(r for r in res.correct if r.rid != rep.rid) if len(res.correct) > 1 else None
        for w in range(1, res.cfg.waves + 1):
            good_round = round_of_wave(w, W, W)
            bad: list[RoundCertificate | None] = [None]
            for r in (good_round - 1, good_round + 1, good_round - W):
                if r in certs:
                    bad.append(certs[r])
            if good_round in certs:
                c = certs[good_round]
                bad.append(replace(c, certified_digests=c.certified_digests[: res.cfg.f]))
                bad.append(replace(c, round=good_round + W))
                if other is not None and good_round in other.engine.round_certs:
                    bad.append(other.engine.round_certs[good_round])
            for cert in bad:
                attempted += 1
                try:
                    rep.enclave.rang_rand(w, cert)
                except CoinRefused:
                    refused += 1
    return refused, attempted


def criterion_7(s: Suite) -> CriterionResult:
    fails = _collect(s.all_runs(), "leaders")
    evaluated = sum(len(r.ordering.coins) for res, _ in s.all_runs() for r in res.correct)
    res, chk = s.random_delay
    hist = chk.metrics.leader_histogram
    pval = checks.leader_fairness_chisq(hist)
    refused, attempted = 0, 0
    for r, _ in (s.random_delay, s.adversarial, *s.matrix[:5]):
        a, b = coin_refusal_probe(r)
        refused += a
        attempted += b
    ok = not fails and pval > 0.01 and refused == attempted and attempted > 0
    detail = (f"{evaluated} (replica, wave) coin evaluations agree"
              f"{'' if not fails else ' NOT: ' + fails[0]}; chi-square p = {pval:.4f} over "
              f"{sum(hist)} waves, histogram {hist}; refused {refused}/{attempted} bad requests")
    return CriterionResult(7, "coin agreement, fairness and gating", ok, detail)


def criterion_8(s: Suite) -> CriterionResult:
    fails = _collect(s.matrix, "rbc", "containment")
    deliveries = sum(r.rbc.stats.delivered for res, _ in s.matrix for r in res.correct)
    dropped = sum(r.rbc.stats.dropped_invalid for res, _ in s.matrix for r in res.correct)
    detail = f"{deliveries} deliveries checked, {dropped} invalid messages dropped"
    if fails:
        detail += "; " + "; ".join(fails[:3])
    return CriterionResult(8, "reliable broadcast properties", not fails, detail)


def criterion_9(s: Suite) -> CriterionResult:
    runs = [(res, chk) for res, chk in s.matrix if res.cfg.encrypt]
    byz = sum(1 for res, _ in runs if res.cfg.faults)
    fails = _collect(runs, "taint")
    probes = sum(res.probe.checks for res, _ in runs)
    plaintexts = sum(len(res.probe.plaintexts) for res, _ in runs)
    ok = not fails and len(runs) >= 10 and byz >= 1 and plaintexts > 0
    detail = (f"{len(runs)} encrypted runs ({byz} with faults), {plaintexts} probe plaintexts, "
              f"{probes} state checks, {sum(len(r.probe.violations) for r, _ in runs)} leaks")
    return CriterionResult(9, "censorship gating", ok, detail)


def _read_all(paths: dict[str, Path]) -> dict[str, bytes]:
    return {name: p.read_bytes() for name, p in sorted(paths.items())}


def criterion_10(s: Suite) -> CriterionResult:
    picks = [s.matrix[i][0] for i in (0, len(s.matrix) // 2, len(s.matrix) - 1)]
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for k, res in enumerate(picks):
            first = _read_all(write_run(res, Path(tmp) / f"a{k}"))
            again = _read_all(write_run(run_scenario(res.cfg), Path(tmp) / f"b{k}"))
            if first != again:
                mismatched.append(res.cfg.label())
    detail = f"{len(picks)} scenarios rerun; " + (
        "all artifacts byte-identical" if not mismatched else "differ: " + ", ".join(mismatched))
    return CriterionResult(10, "deterministic replay", not mismatched, detail)


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10)


def run_acceptance(suite: Suite | None = None) -> list[CriterionResult]:
    suite = suite or Suite()
    return [crit(suite) for crit in CRITERIA]
