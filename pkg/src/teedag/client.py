"""Client workflow: optional session key, payload encryption, submission, acks.

Client/replica wire messages (integers big-endian)::

    submit   0x10 | u32 client | tx              (tx as in the vertex layout)
    session  0x11 | u64 session_id | 32B tx digest
    ack      0x12 | u64 sn | 32B tx digest
"""
from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Callable

from .core import DIGEST_LEN, Digest, Transaction, decode_transaction
from .crypto import NONCE_LEN, SESSION_KEY_LEN, session_encrypt, wrap_with_public_key

log = logging.getLogger(__name__)

KIND_SUBMIT = 0x10
KIND_SESSION = 0x11
KIND_ACK = 0x12
CLIENT_KINDS = frozenset((KIND_SUBMIT, KIND_SESSION, KIND_ACK))


def encode_submit(client: int, tx: Transaction) -> bytes:
    return struct.pack(">BI", KIND_SUBMIT, client) + tx.encode()


def decode_submit(data: bytes) -> tuple[int, Transaction]:
    kind, client = struct.unpack_from(">BI", data, 0)
    if kind != KIND_SUBMIT:
        raise ValueError("not a submit message")
    return client, decode_transaction(data[5:])


@dataclass(frozen=True)
class Response:
    kind: int
    value: int            # session id or commit sequence number
    tx_digest: Digest

    def encode(self) -> bytes:
        return struct.pack(">BQ", self.kind, self.value) + self.tx_digest

    @classmethod
    def decode(cls, data: bytes) -> "Response":
        kind, value = struct.unpack_from(">BQ", data, 0)
        digest = data[9:]
        if kind not in (KIND_SESSION, KIND_ACK) or len(digest) != DIGEST_LEN:
            raise ValueError("malformed response")
        return cls(kind, value, bytes(digest))


@dataclass
class ClientState:
    censorship_protection: bool
    main_pk: bytes | None = None
    session_key: bytes | None = None
    wrapped_key: bytes | None = None
    session_id: int | None = None
    submitted: list[Digest] = field(default_factory=list)


@dataclass
class Submission:
    plaintext: bytes
    tx: Transaction
    time: int


class Client:
    """A client bound to a single ingress replica."""

    def __init__(self, client_id: int, ingress: int, protection: bool, rng: random.Random,
                 send: Callable[[int, bytes], None], main_pk: bytes | None = None,
                 clock: Callable[[], int] = lambda: 0):
        self.client_id = client_id
        self.ingress = ingress
        self.state = ClientState(protection, main_pk)
        self._rng = rng
        self._send = send
        self._clock = clock
        self.submissions: dict[Digest, Submission] = {}
        self.acked: dict[Digest, int] = {}
        self.ack_times: dict[Digest, int] = {}

    def initialize_session_key(self) -> None:
        st = self.state
        if not st.censorship_protection:
            return
        if st.main_pk is None:
            raise RuntimeError("main public key not fetched")
        st.session_key = self._rng.randbytes(SESSION_KEY_LEN)
        st.wrapped_key = wrap_with_public_key(st.main_pk, st.session_key)
        st.session_id = None

    def submit_transaction(self, data: bytes) -> Transaction:
        st = self.state
        if st.censorship_protection:
            if st.session_key is None:
                self.initialize_session_key()
            ct = session_encrypt(st.session_key, self._rng.randbytes(NONCE_LEN), data)
            if st.session_id is None:
                # Until the id is known the wrapped key rides along in clear.
                tx = Transaction(ct, None, True, st.wrapped_key)
            else:
                tx = Transaction(ct, st.session_id, True, None)
        else:
            tx = Transaction(data)
        st.submitted.append(tx.digest)
        self.submissions[tx.digest] = Submission(data, tx, self._clock())
        self._send(self.ingress, encode_submit(self.client_id, tx))
        return tx

    def on_response(self, resp: Response) -> None:
        if resp.kind == KIND_SESSION:
            if self.state.session_id is None:
                self.state.session_id = resp.value
            elif self.state.session_id != resp.value:
                log.info("client %d: ignoring second session id %d", self.client_id, resp.value)
            return
        if resp.tx_digest in self.submissions and resp.tx_digest not in self.acked:
            self.acked[resp.tx_digest] = resp.value
            self.ack_times[resp.tx_digest] = self._clock()

    def on_message(self, src: int, payload: bytes) -> None:
        try:
            resp = Response.decode(payload)
        except (ValueError, struct.error):
            return
        if src == self.ingress:
            self.on_response(resp)

    @property
    def all_acked(self) -> bool:
        return len(self.acked) == len(self.submissions)
