"""Wave leader election, commit rule and deterministic total order."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Callable, Mapping

from .core import DagStore, Digest, ReplicaId, Transaction, Vertex, round_of_wave
from .crypto import DecryptionError
from .trusted import (
    CoinCertificate,
    CommitEvidence,
    Enclave,
    RoundCertificate,
    TrustedError,
)

log = logging.getLogger(__name__)


class OrderingViolation(RuntimeError):
    """Disclosure was refused for a vertex inside a committed leader's history."""


@dataclass(frozen=True)
class CommitRecord:
    sn: int
    tx: Transaction
    vertex_digest: Digest
    round: int
    source: ReplicaId
    wave: int

    def to_line(self) -> str:
        return (f"{self.sn}\t{self.wave}\t{self.round}\t{self.source}\t"
                f"{self.vertex_digest.hex()}\t{self.tx.encode().hex()}")


@dataclass(frozen=True)
class LeaderCommit:
    wave: int
    digest: Digest
    round: int
    source: ReplicaId
    direct: bool
    anchor_wave: int


@dataclass
class WaveOutcome:
    wave: int
    leader: ReplicaId
    present: bool
    supporters: int
    direct: bool


@dataclass
class OrderingState:
    decided_wave: int = 0
    delivered_mask: int = 0
    leaders_stack: list[Vertex] = field(default_factory=list)


class Ordering:
    """Ordering layer for one replica.

    ``on_commit(record, original_tx)`` fires per committed transaction, with
    the transaction as it appeared in the DAG.  ``on_session(sid, original_tx)``
    fires when a committed transaction registers a new session key.
    """

    def __init__(self, replica: ReplicaId, f: int, rounds_per_wave: int, dag: DagStore,
                 enclave: Enclave, round_certs: Mapping[int, RoundCertificate],
                 on_commit: Callable[[CommitRecord, Transaction], None] | None = None,
                 on_session: Callable[[int, Transaction], None] | None = None):
        self.replica = replica
        self.f = f
        self.W = rounds_per_wave
        self.dag = dag
        self.enclave = enclave
        self.round_certs = round_certs
        self._on_commit = on_commit
        self._on_session = on_session
        self.state = OrderingState()
        self.log: list[CommitRecord] = []
        self.delivered_vertices: set[Digest] = set()
        self.coins: dict[int, CoinCertificate] = {}
        self.outcomes: dict[int, WaveOutcome] = {}
        self.leader_commits: list[LeaderCommit] = []
        self._registered: set[bytes] = set()

    @property
    def decided_wave(self) -> int:
        return self.state.decided_wave

    def choose_leader(self, w: int) -> ReplicaId:
        coin = self.coins.get(w)
        if coin is None:
            cert = self.round_certs.get(round_of_wave(w, self.W, self.W))
            coin = self.enclave.rang_rand(w, cert)
            self.coins[w] = coin
        return coin.leader

    def get_wave_vertex_leader(self, w: int) -> Vertex | None:
        return self.dag.at(round_of_wave(w, 1, self.W), self.choose_leader(w))

    def wave_ready(self, w: int) -> None:
        leader = self.choose_leader(w)
        v = self.dag.at(round_of_wave(w, 1, self.W), leader)
        if v is None:
            self.outcomes[w] = WaveOutcome(w, leader, False, 0, False)
            return
        supporters = self.dag.strong_supporters(v, round_of_wave(w, self.W, self.W))
        direct = len(supporters) >= self.f + 1
        self.outcomes[w] = WaveOutcome(w, leader, True, len(supporters), direct)
        if not direct:
            return
        stack = self.state.leaders_stack
        stack.append(v)
        chased = [(w, v)]
        cur = v
        for w2 in range(w - 1, self.state.decided_wave, -1):
            v2 = self.get_wave_vertex_leader(w2)
            if v2 is not None and self.dag.strong_path_exists(cur, v2):
                stack.append(v2)
                chased.append((w2, v2))
                cur = v2
        self.state.decided_wave = w
        waves = {x.digest: wv for wv, x in chased}
        evidence = self._anchor_evidence(w, v, supporters)
        self.order_vertices(stack, waves, evidence)

    def _anchor_evidence(self, w: int, anchor: Vertex, supporters: list[Vertex]):
        bit = self.dag.bit(anchor)
        paths = []
        for s in supporters[: self.f + 1]:
            path = [s]
            x = s
            while x.digest != anchor.digest:
                # Follow any strong parent that still strong-reaches the anchor.
                for d in x.strong_edges:
                    y = self.dag.get(d)
                    if y.round >= anchor.round and self.dag.strong_mask(y) & bit:
                        x = y
                        break
                else:
                    raise OrderingViolation("supporter lost its strong path")
                path.append(x)
            paths.append(tuple(path))
        return self.coins[w], anchor, tuple(paths)

    def order_vertices(self, stack: list[Vertex], waves: Mapping[Digest, int],
                       anchor_evidence) -> list[CommitRecord]:
        coin, anchor, supporters = anchor_evidence
        parents: dict[Digest, Digest] | None = None
        emitted = []
        while stack:
            leader = stack.pop()
            wave = waves[leader.digest]
            hist = self.dag.reach_mask(leader) & ~self.state.delivered_mask
            for x in self.dag.vertices_of(hist):
                block = x.block
                if block.has_encrypted:
                    if parents is None:
                        parents = self._bfs_tree(anchor)
                    block = self._disclose(x, CommitEvidence(
                        coin, anchor, supporters, self._path_to(parents, anchor, x)))
                for orig, tx in zip(x.block.txns, block.txns):
                    rec = CommitRecord(len(self.log), tx, x.digest, x.round, x.source, wave)
                    self.log.append(rec)
                    emitted.append(rec)
                    if self._on_commit is not None:
                        self._on_commit(rec, orig)
                self.delivered_vertices.add(x.digest)
            self.state.delivered_mask |= hist
            self.leader_commits.append(LeaderCommit(
                wave, leader.digest, leader.round, leader.source,
                leader.digest == anchor.digest, waves[anchor.digest]))
        return emitted

    def _bfs_tree(self, anchor: Vertex) -> dict[Digest, Digest]:
        """Parent pointers over the anchor's not-yet-delivered history."""
        undelivered = self.dag.reach_mask(anchor) & ~self.state.delivered_mask
        parents: dict[Digest, Digest] = {}
        seen = {anchor.digest}
        queue = deque([anchor])
        while queue:
            x = queue.popleft()
            for d in x.edges:
                if d in seen:
                    continue
                y = self.dag.get(d)
                if not self.dag.bit(y) & undelivered:
                    continue
                seen.add(d)
                parents[d] = x.digest
                queue.append(y)
        return parents

    def _path_to(self, parents: Mapping[Digest, Digest], anchor: Vertex, x: Vertex) -> tuple[Vertex, ...]:
        chain = [x.digest]
        while chain[-1] != anchor.digest:
            chain.append(parents[chain[-1]])
        return tuple(self.dag.get(d) for d in reversed(chain))

    def _disclose(self, x: Vertex, evidence: CommitEvidence):
        for tx in x.block.txns:
            if tx.encrypted and tx.wrapped_key is not None and tx.wrapped_key not in self._registered:
                try:
                    sid, _ = self.enclave.trad_add_session_key(tx.wrapped_key)
                except DecryptionError:
                    log.warning("replica %d: undecryptable wrapped key in %r", self.replica, x)
                    continue
                self._registered.add(tx.wrapped_key)
                if self._on_session is not None:
                    self._on_session(sid, tx)
        try:
            return self.enclave.trad_decrypt(x.block, evidence)
        except (TrustedError, DecryptionError) as exc:
            raise OrderingViolation(f"replica {self.replica}: disclosure of {x!r} refused: {exc}") from exc


def analytic_wave_commit_probability(f: int) -> tuple[Fraction, Fraction]:
    """Exact (p_u, P) of the random-delay expected-commit argument.

    ``p_u`` is the chance a third-round vertex strong-reaches the leader;
    ``P`` is the chance at least f+1 of the 2f+1 third-round vertices do.
    """
    if f < 1:
        raise ValueError(f"f must be >= 1, got {f}")
    n = 2 * f + 1
    p = Fraction(f + 1, n)
    total = comb(n, f + 1)
    p_u = sum((comb(n, k) * p ** k * (1 - p) ** (n - k)
               * (1 - Fraction(comb(n - k, f + 1), total)) for k in range(n + 1)),
              Fraction(0))
    big_p = sum((comb(n, i) * p_u ** i * (1 - p_u) ** (n - i) for i in range(f + 1, n + 1)),
                Fraction(0))
    return p_u, big_p
