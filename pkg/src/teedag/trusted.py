"""Software enclave: monotonic counter, round certifier, coin, and disclosure.

Every replica gets one :class:`Enclave` from a :class:`Dealer`.  The dealer
stands in for remote attestation and distributed key generation: it derives
a per-replica authentication key, the shared coin seed and the shared main
key pair from one setup seed and installs copies into each enclave.

Untrusted code holds only the enclave's public methods and the
:class:`Verifier`, whose checks need no secret from the caller.

Tag layouts (HMAC-SHA256 truncated to 16 bytes, integers big-endian)::

    counter  b"MIC"  | u32 replica | u64 counter | 32B vertex digest
    round    b"RAC"  | u32 replica | u64 round | u32 count | digest*
    coin     b"RANG" | u64 wave | u32 leader            (shared coin key)
    session  b"TRAD" | u32 replica | u64 session_id
"""
from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .core import (
    TAG_LEN,
    CounterAttestation,
    Digest,
    ReplicaId,
    Transaction,
    TransactionBlock,
    Vertex,
    compute_digest,
    make_genesis,
    round_of_wave,
)
from .crypto import (
    SESSION_KEY_LEN,
    DecryptionError,
    RsaMainKey,
    session_decrypt,
    session_id_for,
)

MASK64 = (1 << 64) - 1

__all__ = [
    "AttestationError", "CoinCertificate", "CoinRefused", "CommitEvidence",
    "CounterAttestation", "DecryptionError", "Dealer", "DisclosureRefused",
    "DuplicateSource", "Enclave", "EnclaveStateError", "EquivocationRefused",
    "InvalidAttestation", "InvalidVertexMetadata", "MixedRounds", "QuorumTooSmall",
    "RoundCertificate", "StaleVertex", "TrustedError", "UnknownSession", "Verifier",
    "splitmix64",
]


class TrustedError(Exception):
    pass


class AttestationError(TrustedError):
    pass


class EquivocationRefused(TrustedError):
    pass


class QuorumTooSmall(TrustedError):
    pass


class MixedRounds(TrustedError):
    pass


class DuplicateSource(TrustedError):
    pass


class InvalidAttestation(TrustedError):
    pass


class InvalidVertexMetadata(TrustedError):
    pass


class StaleVertex(TrustedError):
    pass


class EnclaveStateError(TrustedError):
    pass


class CoinRefused(TrustedError):
    pass


class DisclosureRefused(TrustedError):
    pass


class UnknownSession(TrustedError):
    pass


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (state is advanced once first)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def coin_draw(seed: int, wave: int) -> int:
    return splitmix64((seed ^ wave) & MASK64)


def _tag(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha256).digest()[:TAG_LEN]


def _counter_msg(replica: int, value: int, digest: Digest) -> bytes:
    return b"MIC" + struct.pack(">IQ", replica, value) + digest


def _round_msg(replica: int, rnd: int, digests: Sequence[Digest]) -> bytes:
    return b"RAC" + struct.pack(">IQI", replica, rnd, len(digests)) + b"".join(digests)


def _coin_msg(wave: int, leader: int) -> bytes:
    return b"RANG" + struct.pack(">QI", wave, leader)


@dataclass(frozen=True)
class RoundCertificate:
    replica: ReplicaId
    round: int
    certified_digests: tuple[Digest, ...]
    tag: bytes


@dataclass(frozen=True)
class CoinCertificate:
    wave: int
    leader: ReplicaId
    tag: bytes


@dataclass(frozen=True)
class CommitEvidence:
    """What the host hands to TRAD to justify disclosing a block.

    ``anchor`` is the directly committed leader of ``coin.wave``;
    ``supporters`` are strong-edge paths from distinct last-round vertices of
    that wave to the anchor; ``path`` runs from the anchor to the vertex
    whose block is being disclosed.
    """

    coin: CoinCertificate
    anchor: Vertex
    supporters: tuple[tuple[Vertex, ...], ...]
    path: tuple[Vertex, ...]


class Verifier:
    """Public verification context shared by all replicas."""

    def __init__(self, n: int, f: int, rounds_per_wave: int, genesis: Sequence[Vertex],
                 replica_keys: Sequence[bytes], coin_key: bytes):
        self.n = n
        self.f = f
        self.rounds_per_wave = rounds_per_wave
        self.genesis = tuple(genesis)
        self.genesis_digests = frozenset(g.digest for g in genesis)
        self._replica_keys = tuple(replica_keys)
        self._coin_key = coin_key

    def verify_counter(self, att: CounterAttestation, digest: Digest) -> bool:
        if att.vertex_digest != digest or not 0 <= att.replica < self.n:
            return False
        if len(att.tag) != TAG_LEN:
            return False
        expected = _tag(self._replica_keys[att.replica],
                        _counter_msg(att.replica, att.counter_value, digest))
        return hmac.compare_digest(expected, att.tag)

    def verify_round_cert(self, cert: RoundCertificate) -> bool:
        if not 0 <= cert.replica < self.n or len(cert.tag) != TAG_LEN:
            return False
        expected = _tag(self._replica_keys[cert.replica],
                        _round_msg(cert.replica, cert.round, cert.certified_digests))
        return hmac.compare_digest(expected, cert.tag)

    def verify_coin(self, cert: CoinCertificate) -> bool:
        if len(cert.tag) != TAG_LEN:
            return False
        return hmac.compare_digest(_tag(self._coin_key, _coin_msg(cert.wave, cert.leader)), cert.tag)

    def vertex_attested(self, v: Vertex) -> bool:
        """Attestation check on content-recomputed digest (no cached values)."""
        d = compute_digest(v)
        if v.round == 0:
            return v.counter is None and d in self.genesis_digests
        att = v.counter
        return (att is not None and att.replica == v.source
                and att.counter_value == v.round and self.verify_counter(att, d))


@lru_cache(maxsize=32)
def _main_key_for(seed: int, bits: int) -> RsaMainKey:
    return RsaMainKey.generate(random.Random(f"main-key/{seed}"), bits)


class Dealer:
    """Trusted setup: derives and installs every enclave secret from ``seed``."""

    def __init__(self, n: int, f: int, seed: int, rounds_per_wave: int = 3, key_bits: int = 1024):
        self.n = n
        self.f = f
        self.rounds_per_wave = rounds_per_wave
        rng = random.Random(f"dealer/{seed}")
        self._replica_keys = [rng.randbytes(32) for _ in range(n)]
        self._coin_key = rng.randbytes(32)
        self._rand_seed = rng.getrandbits(64)
        self._main_key = _main_key_for(seed, key_bits)
        self.genesis = make_genesis(f)
        self.verifier = Verifier(n, f, rounds_per_wave, self.genesis,
                                 self._replica_keys, self._coin_key)

    def enclave(self, replica: ReplicaId, provision: bool = True) -> "Enclave":
        enc = Enclave(replica, self.n, self.f, self.rounds_per_wave, self.verifier,
                      self._replica_keys[replica], self._coin_key)
        if provision:
            enc._install_main_key(self._main_key)
            enc.rang_set_seed(self._rand_seed)
        return enc


class Enclave:
    """One replica's trusted components.  Operations are single-threaded."""

    def __init__(self, replica: ReplicaId, n: int, f: int, rounds_per_wave: int,
                 verifier: Verifier, replica_key: bytes, coin_key: bytes):
        self.replica = replica
        self.n = n
        self.f = f
        self.rounds_per_wave = rounds_per_wave
        self.verifier = verifier
        self._key = replica_key
        self._coin_key = coin_key
        self._counter = 0
        self._seed: int | None = None
        self._rand_called = False
        self._coins: dict[int, CoinCertificate] = {}
        self._coin_high_water = 0
        self._main_key: RsaMainKey | None = None
        self._sessions: dict[int, bytes] = {}
        self._anchors: set[Digest] = set()
        self._attested: set[Digest] = set()

    # -- MIC -----------------------------------------------------------------

    @property
    def counter_value(self) -> int:
        return self._counter

    def mic_get_counter(self, cert: RoundCertificate, vertex_digest: Digest) -> tuple[int, CounterAttestation]:
        if cert.replica != self.replica or not self.verifier.verify_round_cert(cert):
            raise AttestationError("round certificate does not verify for this enclave")
        if cert.round < self._counter:
            raise EquivocationRefused(
                f"counter {cert.round + 1} already issued (current {self._counter})")
        if cert.round > self._counter:
            raise AttestationError(f"certificate for round {cert.round} ahead of counter {self._counter}")
        value = cert.round + 1
        tag = _tag(self._key, _counter_msg(self.replica, value, vertex_digest))
        self._counter = value
        return value, CounterAttestation(self.replica, value, vertex_digest, tag)

    def mic_verify(self, att: CounterAttestation, vertex_digest: Digest) -> bool:
        return self.verifier.verify_counter(att, vertex_digest)

    # -- RAC -----------------------------------------------------------------

    def rac_validate_vertices(self, vertices: Sequence[Vertex]) -> RoundCertificate:
        if len(vertices) < self.f + 1:
            raise QuorumTooSmall(f"{len(vertices)} vertices, need {self.f + 1}")
        rounds = {v.round for v in vertices}
        if len(rounds) != 1:
            raise MixedRounds(f"vertices span rounds {sorted(rounds)}")
        (rnd,) = rounds
        sources = [v.source for v in vertices]
        if len(set(sources)) != len(sources):
            raise DuplicateSource(f"duplicate sources in {sorted(sources)}")
        if rnd < self._counter:
            raise StaleVertex(f"round {rnd} is below current round {self._counter}")
        for v in vertices:
            if not self._attested_vertex(v):
                raise InvalidAttestation(f"{v!r} carries no valid attestation")
            if rnd >= 1 and (len(v.strong_edges) < self.f + 1
                             or set(v.strong_edges) & set(v.weak_edges)):
                raise InvalidVertexMetadata(f"{v!r} violates edge invariants")
        digests = tuple(sorted(compute_digest(v) for v in vertices))
        return RoundCertificate(self.replica, rnd, digests,
                                _tag(self._key, _round_msg(self.replica, rnd, digests)))

    def _attested_vertex(self, v: Vertex) -> bool:
        d = compute_digest(v)
        if d in self._attested:
            return True
        ok = self.verifier.vertex_attested(v)
        if ok:
            self._attested.add(d)
        return ok

    # -- RANG ----------------------------------------------------------------

    def rang_set_seed(self, seed: int) -> None:
        if self._rand_called:
            raise EnclaveStateError("seed can only be set before the first draw")
        self._seed = seed & MASK64

    def rang_rand(self, wave: int, cert: RoundCertificate | None) -> CoinCertificate:
        if self._seed is None:
            raise EnclaveStateError("coin seed not installed")
        if wave < 1:
            raise CoinRefused(f"invalid wave {wave}")
        if cert is None:
            raise CoinRefused("missing round certificate")
        if cert.replica != self.replica or not self.verifier.verify_round_cert(cert):
            raise CoinRefused("round certificate does not verify")
        if len(set(cert.certified_digests)) < self.f + 1:
            raise CoinRefused("certificate below quorum")
        last = round_of_wave(wave, self.rounds_per_wave, self.rounds_per_wave)
        if cert.round != last:
            raise CoinRefused(f"wave {wave} needs a certificate for round {last}, got {cert.round}")
        self._rand_called = True
        cached = self._coins.get(wave)
        if cached is not None:
            return cached
        leader = coin_draw(self._seed, wave) % self.n
        coin = CoinCertificate(wave, leader, _tag(self._coin_key, _coin_msg(wave, leader)))
        self._coins[wave] = coin
        self._coin_high_water = max(self._coin_high_water, wave)
        return coin

    # -- TRAD ----------------------------------------------------------------

    def _install_main_key(self, key: RsaMainKey) -> None:
        self._main_key = key

    def trad_get_pub_key(self) -> bytes:
        if self._main_key is None:
            raise EnclaveStateError("main key not provisioned")
        return self._main_key.public_bytes()

    def trad_add_session_key(self, encrypted_session_key: bytes) -> tuple[int, bytes]:
        if self._main_key is None:
            raise EnclaveStateError("main key not provisioned")
        key = self._main_key.unwrap(encrypted_session_key)
        if len(key) != SESSION_KEY_LEN:
            raise DecryptionError("wrapped blob is not a session key")
        sid = session_id_for(encrypted_session_key)
        known = self._sessions.get(sid)
        if known is not None and known != key:
            raise TrustedError(f"session id collision for {sid}")
        self._sessions[sid] = key
        tag = _tag(self._key, b"TRAD" + struct.pack(">IQ", self.replica, sid))
        return sid, tag

    def trad_decrypt(self, block: TransactionBlock, evidence: CommitEvidence | None) -> TransactionBlock:
        if evidence is None:
            raise DisclosureRefused("no commit evidence")
        self._check_evidence(block, evidence)
        out = []
        for tx in block.txns:
            if not tx.encrypted:
                out.append(tx)
                continue
            if tx.session_id is not None:
                sid = tx.session_id
            elif tx.wrapped_key is not None:
                sid = session_id_for(tx.wrapped_key)
            else:
                raise UnknownSession("encrypted transaction names no session")
            key = self._sessions.get(sid)
            if key is None:
                raise UnknownSession(f"session {sid} was never registered")
            out.append(Transaction(session_decrypt(key, tx.payload), sid, False, None))
        return TransactionBlock(tuple(out))

    def _check_evidence(self, block: TransactionBlock, ev: CommitEvidence) -> None:
        coin = ev.coin
        if not self.verifier.verify_coin(coin):
            raise DisclosureRefused("coin certificate does not verify")
        if coin.wave > self._coin_high_water or coin.wave not in self._coins:
            raise DisclosureRefused(f"coin for wave {coin.wave} was never drawn here")
        W = self.rounds_per_wave
        anchor = ev.anchor
        anchor_digest = compute_digest(anchor)
        if anchor_digest not in self._anchors:
            if anchor.round != round_of_wave(coin.wave, 1, W) or anchor.source != coin.leader:
                raise DisclosureRefused("anchor is not the elected leader vertex")
            if not self._attested_vertex(anchor):
                raise DisclosureRefused("anchor attestation invalid")
            last = round_of_wave(coin.wave, W, W)
            starts = set()
            for path in ev.supporters:
                if not path or path[0].round != last:
                    raise DisclosureRefused("supporter not in the wave's last round")
                self._check_path(path, strong_only=True)
                if compute_digest(path[-1]) != anchor_digest:
                    raise DisclosureRefused("supporter path does not reach the anchor")
                starts.add(path[0].source)
            if len(starts) < self.f + 1:
                raise DisclosureRefused(f"only {len(starts)} supporters, need {self.f + 1}")
            self._anchors.add(anchor_digest)
        path = ev.path
        if not path or compute_digest(path[0]) != anchor_digest:
            raise DisclosureRefused("disclosure path must start at the anchor")
        self._check_path(path, strong_only=False)
        if path[-1].block != block:
            raise DisclosureRefused("path does not end at the disclosed block")

    def _check_path(self, path: Sequence[Vertex], strong_only: bool) -> None:
        prev = None
        for v in path:
            if not self._attested_vertex(v):
                raise DisclosureRefused(f"{v!r} attestation invalid")
            if prev is not None:
                d = compute_digest(v)
                edges = prev.strong_edges if strong_only else prev.strong_edges + prev.weak_edges
                if d not in edges or v.round < 1:
                    raise DisclosureRefused("broken path witness")
            prev = v
