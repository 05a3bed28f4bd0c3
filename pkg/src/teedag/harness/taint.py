"""Plaintext taint probe over untrusted replica state.

A registered plaintext may appear in replica i's untrusted state only after
replica i has committed it.  Client traffic and other replicas' traffic must
never contain it.  Checks run on every wire send and ingress write, on a
periodic full scan of every replica, and once more at the end of a run.
"""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class TaintViolation:
    where: str
    owner: int | None
    plaintext: bytes
    tick: int


@dataclass
class TaintProbe:
    n: int
    plaintexts: list[bytes] = field(default_factory=list)
    committed: dict[int, set[bytes]] = field(default_factory=dict)
    violations: list[TaintViolation] = field(default_factory=list)
    checks: int = 0
    scans: int = 0
    clock: object = None

    def register(self, plaintext: bytes) -> None:
        if len(plaintext) < 16:
            raise ValueError("probe plaintexts must be at least 16 bytes")
        self.plaintexts.append(plaintext)

    def mark_committed(self, replica: int, plaintext: bytes) -> None:
        self.committed.setdefault(replica, set()).add(plaintext)

    def _now(self) -> int:
        return self.clock() if self.clock is not None else 0

    def check(self, owner: int | None, data: bytes, where: str) -> None:
        self.checks += 1
        allowed = self.committed.get(owner, ()) if owner is not None and owner < self.n else ()
        for pt in self.plaintexts:
            if pt in data and pt not in allowed:
                self.violations.append(TaintViolation(where, owner, pt, self._now()))

    def on_send(self, env) -> None:
        self.check(env.src, env.payload, "wire")

    def scan_replica(self, replica) -> None:
        """Full snapshot scan of one replica's untrusted state."""
        self.scans += 1
        rid = replica.rid
        for v in replica.dag.all_vertices():
            self.check(rid, v.wire, "dag")
        for v in replica.dag.pending.values():
            self.check(rid, v.wire, "pending")
        for tx in replica.ingress:
            self.check(rid, tx.encode(), "ingress")
        for blk in replica.engine.blocks_to_propose:
            self.check(rid, blk.encode(), "blocks")
        for rec in replica.commit_log:
            self.check(rid, rec.tx.encode(), "commit-log")

    @property
    def clean(self) -> bool:
        return not self.violations
