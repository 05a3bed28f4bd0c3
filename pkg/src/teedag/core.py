"""Vertices, DAG storage, wave arithmetic and path queries.

Canonical vertex byte layout (all integers big-endian)::

    body        := b"TDV1" | u64 round | u32 source | block | edges(strong) | edges(weak)
    block       := u32 count | tx*
    tx          := u8 flags | [u32 len | wrapped_key] | [u64 session_id] | u32 len | payload
    edges       := u32 count | digest*            (32-byte digests, ascending, unique)
    wire        := u32 len(body) | body | u8 has_counter | [attestation]
    attestation := u32 replica | u64 counter_value | 32B vertex_digest | 16B tag

``flags`` bit 0 marks an encrypted payload, bit 1 a present session id and
bit 2 an inline wrapped session key.  The vertex digest is SHA-256 over
``body``; the attestation is not part of the digest because it binds it.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Iterable, Iterator, Sequence

DIGEST_LEN = 32
TAG_LEN = 16
BODY_MAGIC = b"TDV1"

FLAG_ENCRYPTED = 0x01
FLAG_SESSION = 0x02
FLAG_WRAPPED_KEY = 0x04

Digest = bytes
ReplicaId = int


class UnknownVertexError(LookupError):
    """A vertex or digest is not resolved in the store."""


class IntegrityViolation(AssertionError):
    """Two distinct vertices claimed the same (round, source) slot."""


def digest_of(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def check_fault_bound(n: int, f: int) -> None:
    if f < 1 or n != 2 * f + 1:
        raise ValueError(f"need n = 2f+1 with f >= 1, got n={n}, f={f}")


@dataclass(frozen=True)
class Transaction:
    payload: bytes
    session_id: int | None = None
    encrypted: bool = False
    wrapped_key: bytes | None = None

    def encode(self) -> bytes:
        flags = 0
        parts = []
        if self.encrypted:
            flags |= FLAG_ENCRYPTED
        if self.wrapped_key is not None:
            flags |= FLAG_WRAPPED_KEY
            parts.append(struct.pack(">I", len(self.wrapped_key)) + self.wrapped_key)
        if self.session_id is not None:
            flags |= FLAG_SESSION
            parts.append(struct.pack(">Q", self.session_id))
        parts.append(struct.pack(">I", len(self.payload)) + self.payload)
        return bytes([flags]) + b"".join(parts)

    @cached_property
    def digest(self) -> Digest:
        return digest_of(self.encode())


def _read_tx(buf: bytes, pos: int) -> tuple[Transaction, int]:
    flags = buf[pos]
    pos += 1
    wrapped = None
    session = None
    if flags & FLAG_WRAPPED_KEY:
        (ln,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        wrapped = bytes(buf[pos:pos + ln])
        if len(wrapped) != ln:
            raise ValueError("truncated wrapped key")
        pos += ln
    if flags & FLAG_SESSION:
        (session,) = struct.unpack_from(">Q", buf, pos)
        pos += 8
    (ln,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    payload = bytes(buf[pos:pos + ln])
    if len(payload) != ln:
        raise ValueError("truncated payload")
    pos += ln
    return Transaction(payload, session, bool(flags & FLAG_ENCRYPTED), wrapped), pos


def decode_transaction(data: bytes) -> Transaction:
    tx, pos = _read_tx(data, 0)
    if pos != len(data):
        raise ValueError("trailing bytes after transaction")
    return tx


@dataclass(frozen=True)
class TransactionBlock:
    txns: tuple[Transaction, ...] = ()

    def encode(self) -> bytes:
        return struct.pack(">I", len(self.txns)) + b"".join(t.encode() for t in self.txns)

    @property
    def has_encrypted(self) -> bool:
        return any(t.encrypted for t in self.txns)

    def __len__(self) -> int:
        return len(self.txns)


EMPTY_BLOCK = TransactionBlock()


@dataclass(frozen=True)
class CounterAttestation:
    """Enclave proof that ``replica`` bound ``counter_value`` to ``vertex_digest``."""

    replica: ReplicaId
    counter_value: int
    vertex_digest: Digest
    tag: bytes

    def encode(self) -> bytes:
        return (struct.pack(">IQ", self.replica, self.counter_value)
                + self.vertex_digest + self.tag)

    @classmethod
    def decode(cls, data: bytes) -> "CounterAttestation":
        if len(data) != 12 + DIGEST_LEN + TAG_LEN:
            raise ValueError("bad attestation length")
        replica, value = struct.unpack_from(">IQ", data, 0)
        return cls(replica, value, bytes(data[12:12 + DIGEST_LEN]), bytes(data[12 + DIGEST_LEN:]))


ATTESTATION_LEN = 12 + DIGEST_LEN + TAG_LEN


def _norm_edges(edges: Iterable[Digest]) -> tuple[Digest, ...]:
    return tuple(sorted(set(edges)))


@dataclass(frozen=True, eq=False)
class Vertex:
    round: int
    source: ReplicaId
    block: TransactionBlock = EMPTY_BLOCK
    strong_edges: tuple[Digest, ...] = ()
    weak_edges: tuple[Digest, ...] = ()
    counter: CounterAttestation | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "strong_edges", _norm_edges(self.strong_edges))
        object.__setattr__(self, "weak_edges", _norm_edges(self.weak_edges))

    @cached_property
    def body(self) -> bytes:
        return encode_body(self)

    @cached_property
    def digest(self) -> Digest:
        return digest_of(self.body)

    @cached_property
    def wire(self) -> bytes:
        body = self.body
        out = struct.pack(">I", len(body)) + body
        if self.counter is None:
            return out + b"\x00"
        return out + b"\x01" + self.counter.encode()

    @property
    def edges(self) -> tuple[Digest, ...]:
        return self.strong_edges + self.weak_edges

    def with_counter(self, att: CounterAttestation) -> "Vertex":
        return replace(self, counter=att)

    def __eq__(self, other):
        if not isinstance(other, Vertex):
            return NotImplemented
        return self.wire == other.wire

    def __hash__(self):
        return hash(self.digest)

    def __repr__(self):
        return f"Vertex(r={self.round}, src={self.source}, {self.digest.hex()[:8]})"


def encode_body(v: Vertex) -> bytes:
    parts = [BODY_MAGIC, struct.pack(">QI", v.round, v.source), v.block.encode()]
    for edges in (v.strong_edges, v.weak_edges):
        parts.append(struct.pack(">I", len(edges)))
        parts.extend(edges)
    return b"".join(parts)


def compute_digest(v: Vertex) -> Digest:
    """Digest recomputed from content, ignoring any cached value."""
    return digest_of(encode_body(v))


def _decode_body(body: bytes) -> tuple[int, int, TransactionBlock, list, list]:
    if body[:4] != BODY_MAGIC:
        raise ValueError("bad vertex magic")
    rnd, src = struct.unpack_from(">QI", body, 4)
    pos = 16
    (count,) = struct.unpack_from(">I", body, pos)
    pos += 4
    txns = []
    for _ in range(count):
        tx, pos = _read_tx(body, pos)
        txns.append(tx)
    edge_sets = []
    for _ in range(2):
        (count,) = struct.unpack_from(">I", body, pos)
        pos += 4
        end = pos + count * DIGEST_LEN
        if end > len(body):
            raise ValueError("truncated edges")
        edge_sets.append([body[i:i + DIGEST_LEN] for i in range(pos, end, DIGEST_LEN)])
        pos = end
    if pos != len(body):
        raise ValueError("trailing bytes in vertex body")
    return rnd, src, TransactionBlock(tuple(txns)), edge_sets[0], edge_sets[1]


@lru_cache(maxsize=65536)
def decode_vertex(wire: bytes) -> Vertex:
    """Inverse of ``Vertex.wire``; raises ValueError on malformed input."""
    (blen,) = struct.unpack_from(">I", wire, 0)
    body = wire[4:4 + blen]
    if len(body) != blen:
        raise ValueError("truncated vertex")
    rnd, src, block, strong, weak = _decode_body(body)
    rest = wire[4 + blen:]
    counter = None
    if rest[:1] == b"\x01":
        counter = CounterAttestation.decode(rest[1:])
    elif rest != b"\x00":
        raise ValueError("bad counter section")
    return Vertex(rnd, src, block, tuple(strong), tuple(weak), counter)


def make_genesis(f: int) -> tuple[Vertex, ...]:
    """The predefined round-0 vertices, one for each of replicas 0..f."""
    return tuple(Vertex(0, i) for i in range(f + 1))


# -- waves -------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class WaveCoord:
    wave: int
    slot: int


def round_of_wave(w: int, k: int, rounds_per_wave: int = 3) -> int:
    if w < 1:
        raise ValueError(f"wave must be >= 1, got {w}")
    if not 1 <= k <= rounds_per_wave:
        raise ValueError(f"slot must be in [1, {rounds_per_wave}], got {k}")
    return rounds_per_wave * (w - 1) + k


def wave_of_round(r: int, rounds_per_wave: int = 3) -> WaveCoord | None:
    if r < 1:
        return None
    return WaveCoord((r - 1) // rounds_per_wave + 1, (r - 1) % rounds_per_wave + 1)


# -- verification ------------------------------------------------------------

def verify_vertex(v: Vertex, keys) -> bool:
    """Attestation and edge-count validity of ``v``.

    ``keys`` is a verification context exposing ``f``, ``genesis_digests``
    and ``verify_counter(att, digest)``.  Edge *targets* can only be checked
    once they resolve, which happens at DAG insertion.
    """
    if v.round == 0:
        return v.counter is None and v.digest in keys.genesis_digests
    att = v.counter
    if att is None or att.replica != v.source or att.counter_value != v.round:
        return False
    if len(v.strong_edges) < keys.f + 1:
        return False
    if set(v.strong_edges) & set(v.weak_edges):
        return False
    return keys.verify_counter(att, v.digest)


# -- DAG store ---------------------------------------------------------------

def _iter_bits(mask: int) -> Iterator[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


class DagStore:
    """Per-replica vertex store with reachability closures.

    Each inserted vertex gets a local index; ``_reach[i]`` and ``_strong[i]``
    are bitsets of every vertex reachable from vertex ``i`` through any edge
    or through strong edges only.  Round-0 vertices never appear as path
    targets of other vertices, only reflexively.
    """

    def __init__(self, f: int, genesis: Sequence[Vertex]):
        self.f = f
        self.rounds: dict[int, dict[ReplicaId, Vertex]] = {}
        self.by_digest: dict[Digest, Vertex] = {}
        self.pending: dict[Digest, Vertex] = {}
        self.evicted_rounds: set[int] = set()
        self._index: dict[Digest, int] = {}
        self._vertices: list[Vertex] = []
        self._reach: list[int] = []
        self._strong: list[int] = []
        self._all_mask = 0
        for g in genesis:
            if g.round != 0:
                raise ValueError("genesis vertices must be round 0")
            self.insert(g)

    def __contains__(self, digest: Digest) -> bool:
        return digest in self.by_digest

    def __len__(self) -> int:
        return len(self._vertices)

    def round(self, r: int) -> list[Vertex]:
        """Vertices of round ``r`` ordered by source."""
        slot = self.rounds.get(r)
        if not slot:
            return []
        return [slot[s] for s in sorted(slot)]

    def round_size(self, r: int) -> int:
        return len(self.rounds.get(r, ()))

    def get(self, digest: Digest) -> Vertex:
        try:
            return self.by_digest[digest]
        except KeyError:
            raise UnknownVertexError(digest.hex()) from None

    def at(self, r: int, source: ReplicaId) -> Vertex | None:
        return self.rounds.get(r, {}).get(source)

    def missing_refs(self, v: Vertex) -> list[Digest]:
        return [d for d in v.edges if d not in self.by_digest]

    def max_round(self) -> int:
        return max(self.rounds, default=0)

    def insert(self, v: Vertex) -> bool:
        """Add ``v``; returns False if the identical vertex is already present."""
        d = v.digest
        if d in self.by_digest:
            return False
        slot = self.rounds.setdefault(v.round, {})
        other = slot.get(v.source)
        if other is not None:
            raise IntegrityViolation(
                f"second vertex for round {v.round} source {v.source}: {other!r} vs {v!r}")
        idx = len(self._vertices)
        bit = 1 << idx
        reach = bit
        strong = bit
        for e in v.strong_edges:
            j = self._index.get(e)
            if j is None:
                raise UnknownVertexError(f"unresolved strong edge {e.hex()}")
            if self._vertices[j].round >= 1:
                reach |= self._reach[j]
                strong |= self._strong[j]
        for e in v.weak_edges:
            j = self._index.get(e)
            if j is None:
                raise UnknownVertexError(f"unresolved weak edge {e.hex()}")
            if self._vertices[j].round >= 1:
                reach |= self._reach[j]
        self._index[d] = idx
        self._vertices.append(v)
        self._reach.append(reach)
        self._strong.append(strong)
        if v.round >= 1:
            self._all_mask |= bit
        slot[v.source] = v
        self.by_digest[d] = v
        self.pending.pop(d, None)
        return True

    def _idx(self, v: Vertex | Digest) -> int:
        d = v.digest if isinstance(v, Vertex) else v
        try:
            return self._index[d]
        except KeyError:
            raise UnknownVertexError(d.hex()) from None

    def path_exists(self, v: Vertex | Digest, u: Vertex | Digest) -> bool:
        return bool(self._reach[self._idx(v)] >> self._idx(u) & 1)

    def strong_path_exists(self, v: Vertex | Digest, u: Vertex | Digest) -> bool:
        return bool(self._strong[self._idx(v)] >> self._idx(u) & 1)

    def reach_mask(self, v: Vertex | Digest) -> int:
        return self._reach[self._idx(v)]

    def strong_mask(self, v: Vertex | Digest) -> int:
        return self._strong[self._idx(v)]

    def bit(self, v: Vertex | Digest) -> int:
        return 1 << self._idx(v)

    def vertices_of(self, mask: int) -> list[Vertex]:
        """Vertices in ``mask`` ordered by (round, source)."""
        out = [self._vertices[i] for i in _iter_bits(mask)]
        out.sort(key=lambda x: (x.round, x.source))
        return out

    def unreached(self, mask: int, max_round: int) -> list[Vertex]:
        """Round >= 1 vertices up to ``max_round`` whose bit is not in ``mask``."""
        out = [self._vertices[i] for i in _iter_bits(self._all_mask & ~mask)]
        return [x for x in out if x.round <= max_round]

    def strong_supporters(self, u: Vertex, r: int) -> list[Vertex]:
        """Vertices of round ``r`` with a strong path to ``u``."""
        bit = self.bit(u)
        return [x for x in self.round(r) if self._strong[self._index[x.digest]] & bit]

    def evict_round(self, r: int) -> None:
        """Drop round ``r`` from the rounds map; digests stay resolvable."""
        self.rounds.pop(r, None)
        self.evicted_rounds.add(r)

    def snapshot(self) -> dict[int, tuple[Digest, ...]]:
        """Per-round sorted digest tuples, for convergence checks and dumps."""
        return {r: tuple(sorted(x.digest for x in slot.values()))
                for r, slot in sorted(self.rounds.items())}

    def all_vertices(self) -> list[Vertex]:
        return list(self._vertices)


def path_exists(dag: DagStore, v: Vertex, u: Vertex) -> bool:
    return dag.path_exists(v, u)


def strong_path_exists(dag: DagStore, v: Vertex, u: Vertex) -> bool:
    return dag.strong_path_exists(v, u)
