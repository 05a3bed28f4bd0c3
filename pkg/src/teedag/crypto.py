"""Main-key and session-key primitives shared by clients and enclaves.

The main key is textbook RSA over seeded primes with a deterministic,
checksummed padding, so runs are byte-reproducible.  It stands behind the
``MainKeyCipher`` interface; confidentiality against a real attacker is not
a goal here.  Session payloads use AES-GCM.
"""
from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass
from typing import Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from sympy import nextprime

SESSION_KEY_LEN = 16
NONCE_LEN = 12
_PAD_MAGIC = 0x5A


class DecryptionError(Exception):
    pass


class MainKeyCipher(Protocol):
    def public_bytes(self) -> bytes: ...

    def unwrap(self, ciphertext: bytes) -> bytes: ...


@dataclass(frozen=True)
class RsaPublicKey:
    modulus: int
    exponent: int

    def encode(self) -> bytes:
        nb = self.modulus.to_bytes((self.modulus.bit_length() + 7) // 8, "big")
        return struct.pack(">HI", len(nb), self.exponent) + nb

    @classmethod
    def decode(cls, data: bytes) -> "RsaPublicKey":
        ln, e = struct.unpack_from(">HI", data, 0)
        return cls(int.from_bytes(data[6:6 + ln], "big"), e)

    @property
    def size(self) -> int:
        return (self.modulus.bit_length() + 7) // 8


class RsaMainKey:
    """Deterministic RSA key pair; the private exponent never leaves the object."""

    def __init__(self, p: int, q: int, e: int = 65537):
        self.public = RsaPublicKey(p * q, e)
        self._d = pow(e, -1, (p - 1) * (q - 1))

    @classmethod
    def generate(cls, rng: random.Random, bits: int = 1024) -> "RsaMainKey":
        half = bits // 2
        while True:
            p = nextprime(rng.getrandbits(half) | (1 << (half - 1)))
            q = nextprime(rng.getrandbits(half) | (1 << (half - 1)))
            if p != q and (p - 1) % 65537 and (q - 1) % 65537:
                return cls(int(p), int(q))

    def public_bytes(self) -> bytes:
        return self.public.encode()

    def unwrap(self, ciphertext: bytes) -> bytes:
        if len(ciphertext) != self.public.size:
            raise DecryptionError("ciphertext length mismatch")
        c = int.from_bytes(ciphertext, "big")
        if c >= self.public.modulus:
            raise DecryptionError("ciphertext out of range")
        m = pow(c, self._d, self.public.modulus).to_bytes(self.public.size, "big")
        return _unpad(m)


def _pad(data: bytes, size: int) -> bytes:
    body = bytes([_PAD_MAGIC]) + hashlib.sha256(data).digest()[:8] + struct.pack(">H", len(data)) + data
    if len(body) >= size:
        raise ValueError("data too long for main key")
    return body.rjust(size, b"\x00")


def _unpad(m: bytes) -> bytes:
    stripped = m.lstrip(b"\x00")
    if len(stripped) < 11 or stripped[0] != _PAD_MAGIC:
        raise DecryptionError("bad padding")
    check = stripped[1:9]
    (ln,) = struct.unpack_from(">H", stripped, 9)
    data = stripped[11:]
    if len(data) != ln or hashlib.sha256(data).digest()[:8] != check:
        raise DecryptionError("bad padding")
    return data


def wrap_with_public_key(public_key: bytes, data: bytes) -> bytes:
    pub = RsaPublicKey.decode(public_key)
    m = int.from_bytes(_pad(data, pub.size), "big")
    return pow(m, pub.exponent, pub.modulus).to_bytes(pub.size, "big")


def session_encrypt(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    return nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def session_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) < NONCE_LEN + 16:
        raise DecryptionError("ciphertext too short")
    try:
        return AESGCM(key).decrypt(ciphertext[:NONCE_LEN], ciphertext[NONCE_LEN:], None)
    except InvalidTag as exc:
        raise DecryptionError("session ciphertext failed authentication") from exc


def session_id_for(wrapped_key: bytes) -> int:
    """Session ids are derived from the wrapped key so every enclave agrees."""
    return int.from_bytes(hashlib.sha256(b"session-id" + wrapped_key).digest()[:8], "big") >> 1
