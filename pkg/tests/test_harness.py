from __future__ import annotations

import json
from dataclasses import replace

import pytest

from teedag.core import Transaction
from teedag.harness.checks import (
    check_dag_convergence,
    check_leader_agreement,
    check_liveness,
    check_safety,
    check_wave_candidates,
    leader_fairness_chisq,
)
from teedag.harness.cli import main
from teedag.harness.dumps import commit_log_text, diff_logs, metrics_lines, write_run
from teedag.harness.metrics import binomial_half_width, compute_metrics
from teedag.harness.scenario import ScenarioConfig, parse_faults, run_scenario
from teedag.harness.suite import evaluate
from teedag.harness.taint import TaintProbe
from teedag.ordering import CommitRecord


@pytest.fixture(scope="module")
def honest():
    return run_scenario(ScenarioConfig(f=1, waves=50, delay="fixed:5", seed=3, txns=6))


def test_smoke_run_commits_everything(honest):
    assert honest.report.quiescent
    assert check_liveness(honest.correct_logs, honest.obligations)
    assert all(cl.all_acked for cl in honest.clients)
    assert check_safety(honest.correct_logs)
    chk = evaluate(honest)
    assert chk.ok(*chk.verdicts), chk.failures(*chk.verdicts)


def test_seed_replay_is_byte_identical(honest):
    again = run_scenario(honest.cfg)
    for a, b in zip(honest.replicas, again.replicas):
        assert commit_log_text(a.commit_log) == commit_log_text(b.commit_log)
    assert metrics_lines(honest) == metrics_lines(again)


def test_f2_with_two_crashes_still_commits():
    cfg = ScenarioConfig(f=2, waves=12, delay="uniform:1:50", seed=5,
                         faults=parse_faults("crash@100xf", 2))
    res = run_scenario(cfg)
    assert res.report.quiescent
    assert all(len(r.commit_log) > 0 for r in res.correct)
    assert check_safety(res.correct_logs) and check_liveness(res.correct_logs, res.obligations)


@pytest.mark.parametrize("fault", ["equivocate_attempt", "invalid_attestation", "withhold",
                                   "vote_starved_leader", "max_delay"])
def test_byzantine_profiles_keep_safety(fault):
    cfg = ScenarioConfig(f=1, waves=15, delay="uniform:1:20", seed=9,
                         faults=parse_faults(fault, 1), encrypt=True)
    res = run_scenario(cfg)
    chk = evaluate(res)
    assert chk.ok(*chk.verdicts), chk.failures(*chk.verdicts)
    byz = res.replicas[2]
    if fault == "equivocate_attempt":
        assert byz.byz.equivocation_refused > 0 and byz.byz.equivocation_granted == 0
    if fault in ("equivocate_attempt", "invalid_attestation"):
        assert all(r.rbc.stats.dropped_invalid > 0 for r in res.correct)
    if fault == "withhold":
        assert res.report.withheld > 0


def test_withhold_sends_only_to_targets():
    cfg = ScenarioConfig(f=1, waves=3, seed=1, faults=parse_faults("withhold", 1))
    res = run_scenario(cfg)
    sim = res.replicas[2].sim
    assert sim.send_filters[2](type("E", (), {"dst": 0})())
    assert not sim.send_filters[2](type("E", (), {"dst": 1})())


def test_gc_evicts_only_delivered_rounds():
    res = run_scenario(ScenarioConfig(f=1, waves=20, seed=4, gc=6))
    for rep in res.correct:
        assert rep.gc_log
        for _, rounds in rep.gc_log:
            for r in rounds:
                assert r in rep.dag.evicted_rounds
        evicted = [v for v in rep.dag.all_vertices() if v.round in rep.dag.evicted_rounds]
        assert all(v.digest in rep.ordering.delivered_vertices for v in evicted)
    assert check_dag_convergence({r.rid: r.dag for r in res.correct})
    assert check_liveness(res.correct_logs, res.obligations)


def test_encrypted_run_is_taint_clean():
    res = run_scenario(ScenarioConfig(f=1, waves=10, seed=2, encrypt=True))
    assert res.probe.clean and res.probe.checks > 0
    assert check_liveness(res.correct_logs, res.obligations)
    committed = {rec.tx.payload for rec in res.reference.commit_log}
    assert set(res.obligations) <= committed


def test_taint_probe_flags_early_plaintext():
    probe = TaintProbe(3)
    secret = b"0123456789abcdef-secret"
    probe.register(secret)
    probe.check(1, b"xx" + secret, "wire")
    probe.mark_committed(1, secret)
    probe.check(1, secret, "dag")
    probe.check(0, secret, "dag")
    assert [(v.owner, v.where) for v in probe.violations] == [(1, "wire"), (0, "dag")]
    with pytest.raises(ValueError):
        probe.register(b"short")


# -- config parsing ----------------------------------------------------------

def test_parse_faults_assigns_from_top():
    profs = parse_faults("crash@100xf", 3)
    assert [(p.replica, p.behavior, p.at_tick) for p in profs] == [
        (6, "crash", 100), (5, "crash", 100), (4, "crash", 100)]
    assert parse_faults("none", 2) == ()
    with pytest.raises(ValueError):
        parse_faults("crashx2", 1)


@pytest.mark.parametrize("kw", [
    dict(f=0), dict(rounds_per_wave=2), dict(rounds_per_wave=4), dict(waves=0),
])
def test_scenario_validation(kw):
    with pytest.raises(ValueError):
        ScenarioConfig(**kw).validate()


def test_two_round_waves_need_counterexample_kind():
    ScenarioConfig(rounds_per_wave=2, kind="counterexample").validate()


# -- checker self-tests ------------------------------------------------------

def rec(sn, payload):
    return CommitRecord(sn, Transaction(payload), b"\x00" * 32, 1, 0, 1)


def test_safety_detects_corrupted_log():
    good = [rec(0, b"a"), rec(1, b"b")]
    assert check_safety({0: good, 1: good[:1]})
    bad = check_safety({0: good, 1: [rec(0, b"a"), rec(1, b"X")]})
    assert not bad and "sn 1" in bad.detail


def test_liveness_detects_missing_tx():
    assert not check_liveness({0: [rec(0, b"a")]}, [b"a", b"b"])
    assert check_liveness({0: [rec(0, b"a")]}, [b"a"])


def test_convergence_detects_difference(honest):
    dags = {r.rid: r.dag for r in honest.replicas}
    assert check_dag_convergence(dags)
    other = run_scenario(replace(honest.cfg, seed=4))
    assert not check_dag_convergence({0: dags[0], 1: other.replicas[1].dag})


def test_fairness_self_tests():
    assert leader_fairness_chisq([1000, 1010, 990]) > 0.01
    assert leader_fairness_chisq([2000, 500, 500]) < 1e-6
    with pytest.raises(ValueError):
        leader_fairness_chisq([1, 0, 0])


def test_wave_candidates_manual_count(forge):
    # Round 2 never references a[2]; round 3 fully connected.
    a = forge.layer(forge.genesis)
    b = [forge.vertex(s, a[:2]) for s in range(3)]
    c = forge.layer(b)
    dag = forge.store(*a, *b, *c)
    assert check_wave_candidates(dag, 1, 1) == 2


def test_leader_agreement_on_run(honest):
    assert check_leader_agreement(honest.replicas)


def test_metrics_fields(honest):
    m = compute_metrics(honest)
    assert m.waves_evaluated == 50
    assert m.txns_committed == len(honest.obligations)
    assert sum(m.leader_histogram) == 50
    assert 0 < m.p_wave_commit_est <= 1
    assert m.rounds_per_committed_leader >= 3
    assert binomial_half_width(0.5, 10_000) == pytest.approx(0.01288, abs=1e-4)


# -- artifacts and CLI -------------------------------------------------------

def test_write_run_and_diff(honest, tmp_path):
    paths = write_run(honest, tmp_path)
    assert {"commits_r0.log", "dag_r0.txt", "metrics.jsonl"} <= set(paths)
    lines = paths["metrics.jsonl"].read_text().splitlines()
    assert json.loads(lines[-1])["type"] == "summary"
    a = paths["commits_r0.log"].read_text().splitlines()
    assert diff_logs(a, a[:-1]) is None
    assert diff_logs(a, ["junk"] + a[1:]) == 0


def test_cli_run(tmp_path, capsys):
    code = main(["run", "--f", "1", "--waves", "15", "--delay", "uniform:1:30", "--seed", "2",
                 "--fault", "crash@50", "--encrypt", "--out", str(tmp_path)])
    summary = json.loads(capsys.readouterr().out)
    assert code == 0, summary
    assert all(summary["verdicts"].values())
    assert (tmp_path / "commits_r0.log").exists()


def test_cli_analytic(capsys):
    assert main(["analytic", "--max-f", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1] == "1\t0.888889\t0.965706"


def test_cli_diff_logs(tmp_path, capsys):
    a, b = tmp_path / "a.log", tmp_path / "b.log"
    a.write_text("x\ny\n")
    b.write_text("x\nz\n")
    assert main(["diff-logs", str(a), str(b)]) == 1
    b.write_text("x\n")
    assert main(["diff-logs", str(a), str(b)]) == 0
