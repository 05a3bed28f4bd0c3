"""Scenario configuration and execution."""
from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field, replace

from ..client import Client
from ..netsim import (
    AdversarialDelay,
    DelayModel,
    FaultProfile,
    FixedDelay,
    RunReport,
    Simulator,
    UniformDelay,
)
from ..replica import Replica, ReplicaConfig
from ..trusted import Dealer
from .taint import TaintProbe

log = logging.getLogger(__name__)

PAYLOAD_LEN = 24
SLOW_DELAY = 200


@dataclass(frozen=True)
class ScenarioConfig:
    f: int = 1
    waves: int = 10
    rounds_per_wave: int = 3
    delay: str = "fixed:5"
    seed: int = 0
    faults: tuple[FaultProfile, ...] = ()
    clients: int = 2
    txns: int = 5
    batch: int = 4
    encrypt: bool = False
    gc: int | None = None
    strict_queue: bool = False
    wave_trigger: str = "literal"
    kind: str = "normal"
    submit_interval: int = 40
    max_events: int = 50_000_000
    scan_every: int = 20_000
    name: str = ""

    @property
    def n(self) -> int:
        return 2 * self.f + 1

    @property
    def max_round(self) -> int:
        return self.rounds_per_wave * self.waves + 1

    def validate(self) -> None:
        if self.f < 1:
            raise ValueError("f must be >= 1")
        if self.rounds_per_wave not in (2, 3):
            raise ValueError("rounds per wave must be 2 or 3")
        if self.rounds_per_wave == 2 and self.kind != "counterexample":
            raise ValueError("two-round waves are only allowed in counterexample scenarios")
        if len(self.faults) > self.f:
            raise ValueError(f"at most f={self.f} fault profiles allowed")
        rids = [p.replica for p in self.faults]
        if len(set(rids)) != len(rids) or any(not 0 <= r < self.n for r in rids):
            raise ValueError("fault profiles must name distinct replicas in range")
        if self.waves < 1:
            raise ValueError("need at least one wave")

    def label(self) -> str:
        if self.name:
            return self.name
        faults = "+".join(p.describe() for p in self.faults) or "none"
        return (f"f{self.f}-W{self.rounds_per_wave}-{self.delay.replace(':', '_')}"
                f"-{faults}-s{self.seed}{'-enc' if self.encrypt else ''}")


def parse_delay(text: str, n: int, f: int, rounds_per_wave: int, rng: random.Random) -> DelayModel:
    kind, _, rest = text.partition(":")
    if kind == "fixed":
        return FixedDelay(int(rest or 5))
    if kind == "uniform":
        lo, _, hi = rest.partition(":")
        return UniformDelay(int(lo), int(hi), rng)
    if kind == "adversarial":
        return AdversarialDelay(rest or "starve-rotating-minority", n, f, rounds_per_wave, rng,
                                slow=SLOW_DELAY)
    raise ValueError(f"unknown delay model {text!r}")


_FAULT_ITEM = re.compile(r"(?P<name>[a-z_]+?)(?:@(?P<tick>\d+))?(?:x(?P<count>\d+|f))?")


def parse_faults(text: str, f: int) -> tuple[FaultProfile, ...]:
    """``name[@tick][xcount]`` items, comma separated, assigned from replica n-1 down.

    ``withhold`` sends only to replica 0 (plus itself).
    """
    n = 2 * f + 1
    out: list[FaultProfile] = []
    if not text or text == "none":
        return ()
    for item in text.split(","):
        m = _FAULT_ITEM.fullmatch(item.strip())
        if m is None:
            raise ValueError(f"bad fault item {item!r}")
        name, tick, c = m.group("name", "tick", "count")
        count = f if c == "f" else int(c or 1)
        for _ in range(count):
            rid = n - 1 - len(out)
            targets = frozenset({0}) if name == "withhold" else frozenset()
            out.append(FaultProfile(rid, name, int(tick or 0), targets))
    if len(out) > f:
        raise ValueError(f"{len(out)} fault profiles exceed f={f}")
    return tuple(out)


@dataclass
class ScenarioResult:
    cfg: ScenarioConfig
    replicas: list[Replica]
    clients: list[Client]
    report: RunReport
    probe: TaintProbe | None
    obligations: list[bytes] = field(default_factory=list)
    submitted: list[tuple[int, int, bytes]] = field(default_factory=list)

    @property
    def correct(self) -> list[Replica]:
        return [r for r in self.replicas if r.honest]

    @property
    def logs(self) -> dict[int, list]:
        return {r.rid: r.commit_log for r in self.replicas}

    @property
    def correct_logs(self) -> dict[int, list]:
        return {r.rid: r.commit_log for r in self.correct}

    @property
    def dags(self) -> dict[int, object]:
        return {r.rid: r.dag for r in self.replicas}

    @property
    def reference(self) -> Replica:
        return self.correct[0]


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    cfg.validate()
    n, f = cfg.n, cfg.f
    dealer = Dealer(n, f, cfg.seed, cfg.rounds_per_wave)
    delay = parse_delay(cfg.delay, n, f, cfg.rounds_per_wave, random.Random(f"{cfg.seed}/delay"))
    sim = Simulator(delay, slow_delay=SLOW_DELAY)
    faults = {p.replica: p for p in cfg.faults}
    rcfg = ReplicaConfig(f, cfg.rounds_per_wave, cfg.batch, cfg.strict_queue, cfg.wave_trigger,
                         cfg.gc, cfg.max_round)
    replicas = []
    for rid in range(n):
        rep = Replica(rid, rcfg, dealer.enclave(rid), dealer.verifier, sim, faults.get(rid))
        sim.add_actor(rid, rep)
        replicas.append(rep)

    probe = None
    if cfg.encrypt:
        probe = TaintProbe(n, clock=lambda: sim.now)
        sim.send_hooks.append(probe.on_send)
        for rep in replicas:
            rep.ingress_hooks.append(lambda rid, data: probe.check(rid, data, "ingress"))
            rep.commit_hooks.append(lambda rid, rec: probe.mark_committed(rid, rec.tx.payload))

    clients = []
    result = ScenarioResult(cfg, replicas, clients, sim.report, probe)
    for c in range(cfg.clients):
        cid = n + c
        ingress = c % n
        rng = random.Random(f"{cfg.seed}/client/{c}")
        pk = replicas[ingress].enclave.trad_get_pub_key() if cfg.encrypt else None
        cl = Client(cid, ingress, cfg.encrypt, rng, lambda dst, p, cid=cid: sim.send(cid, dst, p),
                    main_pk=pk, clock=lambda: sim.now)
        sim.add_actor(cid, cl)
        clients.append(cl)
        for k in range(cfg.txns):
            data = rng.randbytes(PAYLOAD_LEN)
            if probe is not None:
                probe.register(data)
            result.submitted.append((cid, ingress, data))
            if ingress not in faults:
                result.obligations.append(data)
            sim.call_at(1 + k * cfg.submit_interval + c, cid,
                        lambda cl=cl, data=data: cl.submit_transaction(data))

    for rep in replicas:
        sim.call_at(0, rep.rid, rep.start)

    def periodic(events: int) -> None:
        if events % cfg.scan_every == 0:
            for rep in replicas:
                probe.scan_replica(rep)

    sim.run_until_quiescent(cfg.max_events, periodic if probe is not None else None)
    if probe is not None:
        for rep in replicas:
            probe.scan_replica(rep)
    honest = [r for r in replicas if r.honest]
    if honest:
        outcomes = honest[0].ordering.outcomes
        sim.report.wave_commits = [int(outcomes[w].direct) for w in sorted(outcomes)]
    log.info("%s: %d events, quiescent=%s", cfg.label(), sim.report.events, sim.report.quiescent)
    return result


def with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(cfg, seed=seed)
