"""DAG construction: buffering, round advancement and vertex creation."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .core import (
    EMPTY_BLOCK,
    DagStore,
    Digest,
    ReplicaId,
    TransactionBlock,
    Vertex,
    verify_vertex,
)
from .trusted import Enclave, RoundCertificate, TrustedError

log = logging.getLogger(__name__)


class ProtocolViolation(RuntimeError):
    """A trusted component refused a request a correct replica must be able to make."""


@dataclass(frozen=True)
class EngineConfig:
    f: int
    rounds_per_wave: int = 3
    strict_queue: bool = False
    wave_trigger: str = "literal"     # "literal" or "early"
    gc_horizon: int | None = None
    max_round: int | None = None

    def __post_init__(self):
        if self.wave_trigger not in ("literal", "early"):
            raise ValueError(f"unknown wave trigger {self.wave_trigger!r}")
        if self.gc_horizon is not None and self.gc_horizon < 2 * self.rounds_per_wave:
            raise ValueError("gc horizon must be at least two waves")

    @property
    def n(self) -> int:
        return 2 * self.f + 1


class DagEngine:
    """One replica's DAG layer.

    ``broadcast(v)`` hands a freshly attested vertex to reliable broadcast;
    ``wave_ready(w)`` is the ordering layer's entry point.  ``block_source``
    optionally supplies blocks on demand before the local queue is consulted.
    """

    def __init__(self, replica: ReplicaId, cfg: EngineConfig, enclave: Enclave, verifier,
                 broadcast: Callable[[Vertex], None],
                 wave_ready: Callable[[int], None] | None = None,
                 block_source: Callable[[], TransactionBlock | None] | None = None):
        self.replica = replica
        self.cfg = cfg
        self.f = cfg.f
        self.W = cfg.rounds_per_wave
        self.enclave = enclave
        self.verifier = verifier
        self._broadcast = broadcast
        self._wave_ready = wave_ready or (lambda w: None)
        self._block_source = block_source
        self.dag = DagStore(cfg.f, verifier.genesis)
        self.r = 0
        self.blocks_to_propose: deque[TransactionBlock] = deque()
        self.round_certs: dict[int, RoundCertificate] = {}
        self.created: dict[int, Vertex] = {}
        self.halted = False
        self.waiting_for_block = False
        self.dropped: list[tuple[Vertex, str]] = []
        self._waiters: dict[Digest, list[Vertex]] = {}
        self._missing: dict[Digest, int] = {}
        self._in_advance = False

    # -- inbound -------------------------------------------------------------

    def on_r_deliver(self, v: Vertex) -> None:
        if not verify_vertex(v, self.verifier):
            self._drop(v, "verification failed")
            return
        d = v.digest
        if d in self.dag or d in self.dag.pending:
            return
        missing = self.dag.missing_refs(v)
        if missing:
            self.dag.pending[d] = v
            self._missing[d] = len(missing)
            for m in missing:
                self._waiters.setdefault(m, []).append(v)
            return
        self._insert_and_drain(v)
        self.try_advance_round()

    def _drop(self, v: Vertex, why: str) -> None:
        log.info("replica %d: dropped %r (%s)", self.replica, v, why)
        self.dropped.append((v, why))

    def _edge_targets_ok(self, v: Vertex) -> bool:
        for e in v.strong_edges:
            if self.dag.get(e).round != v.round - 1:
                return False
        for e in v.weak_edges:
            if self.dag.get(e).round >= v.round - 1:
                return False
        return True

    def _insert_and_drain(self, v: Vertex) -> None:
        ready = [v]
        while ready:
            x = ready.pop()
            self.dag.pending.pop(x.digest, None)
            if not self._edge_targets_ok(x):
                # Waiters on x stay pending forever; flagged at quiescence.
                self._drop(x, "edge targets violate round invariants")
                continue
            self.dag.insert(x)
            if x.round in self.dag.evicted_rounds:
                self.dag.rounds.get(x.round, {}).pop(x.source, None)
            for w in self._waiters.pop(x.digest, ()):
                left = self._missing[w.digest] - 1
                self._missing[w.digest] = left
                if left == 0:
                    del self._missing[w.digest]
                    ready.append(w)

    # -- advancement ---------------------------------------------------------

    def start(self) -> None:
        self.try_advance_round()

    def enqueue_block(self, block: TransactionBlock) -> None:
        self.blocks_to_propose.append(block)
        self.notify_block_available()

    def notify_block_available(self) -> None:
        if self.waiting_for_block:
            self.try_advance_round()

    def _next_block(self) -> TransactionBlock | None:
        if self.blocks_to_propose:
            return self.blocks_to_propose.popleft()
        if self._block_source is not None:
            return self._block_source()
        return None

    def try_advance_round(self) -> None:
        if self._in_advance:
            return
        self._in_advance = True
        try:
            while not self.halted and self.dag.round_size(self.r) >= self.f + 1:
                if not self._advance_once():
                    return
        finally:
            self._in_advance = False

    def _advance_once(self) -> bool:
        r, W = self.r, self.W
        block = self._next_block()
        if block is None:
            if self.cfg.strict_queue and r < self._halt_round():
                self.waiting_for_block = True
                return False
            block = EMPTY_BLOCK
        self.waiting_for_block = False
        if self.cfg.wave_trigger == "literal" and r > 1 and (r - 1) % W == 0:
            self._wave_ready((r - 1) // W)
        try:
            cert = self.enclave.rac_validate_vertices(self.dag.round(r))
        except TrustedError as exc:
            raise ProtocolViolation(f"replica {self.replica}: RAC refused round {r}: {exc}") from exc
        self.round_certs[r] = cert
        if self.cfg.wave_trigger == "early" and r >= W and r % W == 0:
            self._wave_ready(r // W)
        if r >= self._halt_round():
            self.halted = True
            if block is not EMPTY_BLOCK:
                self.blocks_to_propose.appendleft(block)
            return False
        self.r = r + 1
        v = self.create_new_vertex(self.r, cert, block)
        self._broadcast(v)
        return True

    def _halt_round(self) -> int:
        return self.cfg.max_round if self.cfg.max_round is not None else 1 << 62

    def create_new_vertex(self, r: int, cert: RoundCertificate,
                          block: TransactionBlock | None = None) -> Vertex:
        if cert.round != r - 1:
            raise ValueError(f"certificate for round {cert.round} cannot back round {r}")
        if block is None:
            block = self._next_block() or EMPTY_BLOCK
        strong = tuple(x.digest for x in self.dag.round(r - 1))
        weak = self.set_weak_edges(strong, r)
        draft = Vertex(r, self.replica, block, strong, weak)
        try:
            _, att = self.enclave.mic_get_counter(cert, draft.digest)
        except TrustedError as exc:
            raise ProtocolViolation(f"replica {self.replica}: MIC refused round {r}: {exc}") from exc
        v = draft.with_counter(att)
        self.created[r] = v
        return v

    def set_weak_edges(self, strong: tuple[Digest, ...], r: int) -> tuple[Digest, ...]:
        """Weak edges making every round 1..r-2 vertex reachable from the new vertex.

        Candidates are visited from round r-2 downwards, and each added edge
        extends the reach before lower rounds are considered.
        """
        dag = self.dag
        reach = 0
        for d in strong:
            if dag.get(d).round >= 1:
                reach |= dag.reach_mask(d)
        cands = [u for u in dag.unreached(reach, r - 2) if u.round not in dag.evicted_rounds]
        cands.sort(key=lambda u: (-u.round, u.source))
        weak = []
        for u in cands:
            if reach & dag.bit(u):
                continue
            weak.append(u.digest)
            reach |= dag.reach_mask(u)
        return tuple(weak)

    # -- garbage collection --------------------------------------------------

    def gc(self, last_committed_round: int, is_delivered: Callable[[Vertex], bool]) -> list[int]:
        """Evict rounds strictly below ``last_committed_round - horizon``.

        Stops at the first round that still holds an undelivered vertex.
        """
        horizon = self.cfg.gc_horizon
        if horizon is None:
            return []
        evicted = []
        for rr in range(1, last_committed_round - horizon):
            if rr in self.dag.evicted_rounds:
                continue
            if not all(is_delivered(x) for x in self.dag.round(rr)):
                break
            self.dag.evict_round(rr)
            evicted.append(rr)
        return evicted

    def stuck_pending(self) -> list[Vertex]:
        return sorted(self.dag.pending.values(), key=lambda x: (x.round, x.source))
