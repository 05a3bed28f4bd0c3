"""A replica actor: broadcast, DAG engine, ordering, ingress and fault behaviors."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .broadcast import BROADCAST_KINDS, ProposalMsg, ReliableBroadcast
from .client import KIND_ACK, KIND_SESSION, KIND_SUBMIT, Response, decode_submit
from .core import Digest, Transaction, TransactionBlock, Vertex
from .engine import DagEngine, EngineConfig
from .netsim import Envelope, FaultProfile, Simulator, vertex_slot
from .ordering import CommitRecord, Ordering
from .trusted import Enclave, TrustedError

log = logging.getLogger(__name__)

TAMPER_MARK = b"\xfftampered"


@dataclass
class ByzantineStats:
    equivocation_refused: int = 0
    equivocation_granted: int = 0
    tampered_sent: int = 0


@dataclass
class ReplicaConfig:
    f: int
    rounds_per_wave: int = 3
    batch: int = 4
    strict_queue: bool = False
    wave_trigger: str = "literal"
    gc_horizon: int | None = None
    max_round: int | None = None

    def engine_config(self) -> EngineConfig:
        return EngineConfig(self.f, self.rounds_per_wave, self.strict_queue,
                            self.wave_trigger, self.gc_horizon, self.max_round)


class Replica:
    def __init__(self, rid: int, cfg: ReplicaConfig, enclave: Enclave, verifier,
                 sim: Simulator, fault: FaultProfile | None = None):
        self.rid = rid
        self.cfg = cfg
        self.n = 2 * cfg.f + 1
        self.sim = sim
        self.enclave = enclave
        self.fault = fault
        self.rbc = ReliableBroadcast(rid, self.n, verifier, self._send,
                                     lambda ev: self.engine.on_r_deliver(ev.vertex))
        self.engine = DagEngine(rid, cfg.engine_config(), enclave, verifier,
                                self._broadcast_vertex, self._wave_ready, self._take_block)
        self.ordering = Ordering(rid, cfg.f, cfg.rounds_per_wave, self.engine.dag, enclave,
                                 self.engine.round_certs, self._on_commit, self._on_session)
        self.ingress: deque[Transaction] = deque()
        self.ingress_owner: dict[Digest, int] = {}
        self.ingress_log: list[Transaction] = []
        self.byz = ByzantineStats()
        self.commit_hooks: list[Callable[[int, CommitRecord], None]] = []
        self.ingress_hooks: list[Callable[[int, bytes], None]] = []
        self.gc_log: list[tuple[int, list[int]]] = []
        # original tx digest -> (sn, local round at commit, vertex round)
        self.commit_info: dict[Digest, tuple[int, int, int]] = {}
        self._install_fault()

    @property
    def honest(self) -> bool:
        return self.fault is None

    @property
    def dag(self):
        return self.engine.dag

    @property
    def commit_log(self) -> list[CommitRecord]:
        return self.ordering.log

    # -- network -------------------------------------------------------------

    def _send(self, dst: int, payload: bytes) -> None:
        self.sim.send(self.rid, dst, payload)

    def start(self) -> None:
        self.engine.start()

    def on_message(self, src: int, payload: bytes) -> None:
        if not payload:
            return
        kind = payload[0]
        if kind in BROADCAST_KINDS:
            self.rbc.handle(src, payload)
        elif kind == KIND_SUBMIT:
            self._on_submit(payload)

    def _on_submit(self, payload: bytes) -> None:
        try:
            client, tx = decode_submit(payload)
        except ValueError:
            return
        for hook in self.ingress_hooks:
            hook(self.rid, tx.encode())
        if tx.digest in self.ingress_owner:
            return
        self.ingress_owner[tx.digest] = client
        self.ingress.append(tx)
        self.ingress_log.append(tx)
        self.engine.notify_block_available()

    def _take_block(self) -> TransactionBlock | None:
        if not self.ingress:
            return None
        take = [self.ingress.popleft() for _ in range(min(self.cfg.batch, len(self.ingress)))]
        return TransactionBlock(tuple(take))

    # -- ordering callbacks --------------------------------------------------

    def _wave_ready(self, w: int) -> None:
        self.ordering.wave_ready(w)
        if self.cfg.gc_horizon is not None and self.ordering.leader_commits:
            last = self.ordering.leader_commits[-1].round
            evicted = self.engine.gc(last, lambda x: x.digest in self.ordering.delivered_vertices)
            if evicted:
                self.gc_log.append((w, evicted))

    def _on_commit(self, rec: CommitRecord, orig: Transaction) -> None:
        for hook in self.commit_hooks:
            hook(self.rid, rec)
        self.commit_info[orig.digest] = (rec.sn, self.engine.r, rec.round)
        client = self.ingress_owner.get(orig.digest)
        if client is not None:
            self._send(client, Response(KIND_ACK, rec.sn, orig.digest).encode())

    def _on_session(self, sid: int, orig: Transaction) -> None:
        client = self.ingress_owner.get(orig.digest)
        if client is not None:
            self._send(client, Response(KIND_SESSION, sid, orig.digest).encode())

    # -- fault behaviors -----------------------------------------------------

    def _install_fault(self) -> None:
        prof = self.fault
        if prof is None:
            return
        b = prof.behavior
        if b == "crash":
            self.sim.crash_at[self.rid] = prof.at_tick
        elif b == "withhold":
            targets = prof.targets | {self.rid}
            self.sim.send_filters[self.rid] = lambda env: env.dst in targets
        elif b == "max_delay":
            self.sim.delay_overrides[self.rid] = lambda env: self.sim.slow_delay
        elif b == "vote_starved_leader":
            self.sim.delay_overrides[self.rid] = self._starve_own

    def _starve_own(self, env: Envelope) -> int | None:
        slot = vertex_slot(env.payload)
        if slot is not None and slot[1] == self.rid:
            return self.sim.slow_delay
        return None

    def _broadcast_vertex(self, v: Vertex) -> None:
        self.rbc.r_bcast(v)
        b = self.fault.behavior if self.fault else None
        if b == "equivocate_attempt":
            self._equivocate(v)
        elif b == "invalid_attestation":
            self._send_tampered(v)

    def _conflicting(self, v: Vertex) -> Vertex:
        block = TransactionBlock(v.block.txns + (Transaction(TAMPER_MARK + v.digest[:8]),))
        return Vertex(v.round, v.source, block, v.strong_edges, v.weak_edges)

    def _equivocate(self, v: Vertex) -> None:
        other = self._conflicting(v)
        cert = self.engine.round_certs[v.round - 1]
        try:
            self.enclave.mic_get_counter(cert, other.digest)
            self.byz.equivocation_granted += 1
        except TrustedError:
            self.byz.equivocation_refused += 1
        # Without a fresh counter the only option is to reuse the old one.
        self._raw_broadcast(other.with_counter(v.counter))

    def _send_tampered(self, v: Vertex) -> None:
        self._raw_broadcast(self._conflicting(v).with_counter(v.counter))

    def _raw_broadcast(self, v: Vertex) -> None:
        self.byz.tampered_sent += 1
        payload = ProposalMsg(self.rid, v).encode()
        for dst in range(self.n):
            self._send(dst, payload)
