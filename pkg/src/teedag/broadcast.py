"""Attested reliable broadcast: one proposal, one echo round, deliver on first echo.

A counter attestation makes equivocation impossible, so a single valid echo
is enough to deliver.  Every replica also forwards an echo the first time it
sees a vertex by any route, which keeps delivery consistent when a faulty
sender reaches only part of the network.

Wire format of a broadcast message: ``u8 kind | u32 sender | vertex wire``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from .core import Digest, ReplicaId, Vertex, decode_vertex, verify_vertex

log = logging.getLogger(__name__)


class MsgKind(IntEnum):
    PROPOSAL = 1
    ECHO = 2


BROADCAST_KINDS = frozenset(int(k) for k in MsgKind)


class BroadcastRefused(ValueError):
    pass


@dataclass(frozen=True)
class BroadcastMsg:
    kind: MsgKind
    sender: ReplicaId
    vertex: Vertex

    def encode(self) -> bytes:
        return struct.pack(">BI", self.kind, self.sender) + self.vertex.wire

    @classmethod
    def decode(cls, data: bytes) -> "BroadcastMsg":
        kind, sender = struct.unpack_from(">BI", data, 0)
        return cls(MsgKind(kind), sender, decode_vertex(data[5:]))


def ProposalMsg(sender: ReplicaId, vertex: Vertex) -> BroadcastMsg:
    return BroadcastMsg(MsgKind.PROPOSAL, sender, vertex)


def EchoMsg(sender: ReplicaId, vertex: Vertex) -> BroadcastMsg:
    return BroadcastMsg(MsgKind.ECHO, sender, vertex)


@dataclass(frozen=True)
class DeliveryEvent:
    vertex: Vertex
    round: int
    source: ReplicaId


@dataclass
class BroadcastStats:
    proposals_sent: int = 0
    echoes_sent: int = 0
    dropped_invalid: int = 0
    dropped_malformed: int = 0
    delivered: int = 0
    slot_deliveries: dict = field(default_factory=dict)


class ReliableBroadcast:
    """Per-replica broadcast state machine.

    ``send(dst, payload)`` hands bytes to the network; ``on_deliver`` is
    called once per delivered vertex.
    """

    def __init__(self, replica: ReplicaId, n: int, verifier,
                 send: Callable[[int, bytes], None],
                 on_deliver: Callable[[DeliveryEvent], None] | None = None):
        self.replica = replica
        self.n = n
        self.verifier = verifier
        self._send = send
        self._on_deliver = on_deliver
        self.echoed: set[Digest] = set()
        self.delivered: set[Digest] = set()
        self.stats = BroadcastStats()
        self._valid: dict[bytes, bool] = {}

    def _verified(self, v: Vertex) -> bool:
        # Keyed by wire so a tampered attestation never hits a cached verdict.
        ok = self._valid.get(v.wire)
        if ok is None:
            ok = verify_vertex(v, self.verifier)
            self._valid[v.wire] = ok
        return ok

    def _to_all(self, msg: BroadcastMsg) -> None:
        payload = msg.encode()
        for dst in range(self.n):
            self._send(dst, payload)

    def r_bcast(self, v: Vertex) -> None:
        if not self._verified(v):
            raise BroadcastRefused(f"{v!r} has no valid attestation")
        self.stats.proposals_sent += 1
        self._to_all(ProposalMsg(self.replica, v))

    def handle(self, src: int, data: bytes) -> DeliveryEvent | None:
        try:
            msg = BroadcastMsg.decode(data)
        except (ValueError, struct.error):
            self.stats.dropped_malformed += 1
            log.info("replica %d: malformed broadcast message from %d", self.replica, src)
            return None
        if msg.sender != src:
            self.stats.dropped_malformed += 1
            return None
        if msg.kind is MsgKind.PROPOSAL:
            self.handle_proposal(msg)
            return None
        return self.handle_echo(msg)

    def handle_proposal(self, msg: BroadcastMsg) -> None:
        v = msg.vertex
        if not self._verified(v):
            self.stats.dropped_invalid += 1
            log.info("replica %d: dropped invalid proposal %r from %d", self.replica, v, msg.sender)
            return
        self._echo_once(v)

    def _echo_once(self, v: Vertex) -> None:
        if v.digest in self.echoed:
            return
        self.echoed.add(v.digest)
        self.stats.echoes_sent += 1
        self._to_all(EchoMsg(self.replica, v))

    def handle_echo(self, msg: BroadcastMsg) -> DeliveryEvent | None:
        v = msg.vertex
        if not self._verified(v):
            self.stats.dropped_invalid += 1
            log.info("replica %d: dropped invalid echo %r from %d", self.replica, v, msg.sender)
            return None
        self._echo_once(v)
        if v.digest in self.delivered:
            return None
        self.delivered.add(v.digest)
        slot = (v.round, v.source)
        self.stats.slot_deliveries[slot] = self.stats.slot_deliveries.get(slot, 0) + 1
        self.stats.delivered += 1
        ev = DeliveryEvent(v, v.round, v.source)
        if self._on_deliver is not None:
            self._on_deliver(ev)
        return ev
