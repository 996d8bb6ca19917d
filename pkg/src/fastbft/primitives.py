"""Hashing, signatures, encryption and secret sharing.

Two interchangeable providers implement the same contract:

* :class:`RealProvider` -- SHA-256, Ed25519, AES-128-GCM and an X25519/HKDF
  hybrid public-key scheme from the ``cryptography`` package.
* :class:`FastProvider` -- SHA-256 plus keyed-hash constructions.  Secret
  material lives in a table private to the provider instance, which plays the
  role of the hardware boundary in the simulator.

All randomness is drawn from a caller supplied :class:`random.Random`.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .config import SHAMIR_PRIME

DIGEST_SIZE = 32
SECRET_SIZE = 16
KEY_SIZE = 16
NONCE_SIZE = 12
TAG_SIZE = 16


class DecryptionError(Exception):
    """Raised when a ciphertext fails authentication or uses the wrong key."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: Any = field(repr=False)


class Provider:
    """Abstract crypto provider; see the module docstring."""

    name = "abstract"

    def hash(self, data: bytes) -> bytes:
        return sha256(data)

    def sig_keygen(self, rng: random.Random) -> KeyPair:
        raise NotImplementedError

    def sign(self, private: Any, data: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        raise NotImplementedError

    def seal(self, key: bytes, plaintext: bytes, rng: random.Random) -> bytes:
        raise NotImplementedError

    def open(self, key: bytes, ciphertext: bytes) -> bytes:
        raise NotImplementedError

    def pke_keygen(self, rng: random.Random) -> KeyPair:
        raise NotImplementedError

    def enc(self, public: bytes, data: bytes, rng: random.Random) -> bytes:
        raise NotImplementedError

    def dec(self, private: Any, ciphertext: bytes) -> bytes:
        raise NotImplementedError


class RealProvider(Provider):
    name = "real"

    def sig_keygen(self, rng: random.Random) -> KeyPair:
        sk = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        pk = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(pk, sk)

    def sign(self, private: Ed25519PrivateKey, data: bytes) -> bytes:
        return private.sign(data)

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, data)
        except (InvalidSignature, ValueError):
            return False
        return True

    def seal(self, key: bytes, plaintext: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(NONCE_SIZE)
        return nonce + AESGCM(key).encrypt(nonce, plaintext, None)

    def open(self, key: bytes, ciphertext: bytes) -> bytes:
        if len(ciphertext) < NONCE_SIZE + TAG_SIZE:
            raise DecryptionError("ciphertext too short")
        try:
            return AESGCM(key).decrypt(ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:], None)
        except (InvalidTag, ValueError) as exc:
            raise DecryptionError("authentication failed") from exc

    def pke_keygen(self, rng: random.Random) -> KeyPair:
        sk = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        pk = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(pk, sk)

    @staticmethod
    def _kdf(shared: bytes, eph_pub: bytes, recipient: bytes) -> bytes:
        return HKDF(
            algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=b"fastbft-pke" + eph_pub + recipient
        ).derive(shared)

    def enc(self, public: bytes, data: bytes, rng: random.Random) -> bytes:
        eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        eph_pub = eph.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public))
        key = self._kdf(shared, eph_pub, public)
        return eph_pub + self.seal(key, data, rng)

    def dec(self, private: X25519PrivateKey, ciphertext: bytes) -> bytes:
        if len(ciphertext) < 32:
            raise DecryptionError("ciphertext too short")
        eph_pub, body = ciphertext[:32], ciphertext[32:]
        recipient = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        try:
            shared = private.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        except ValueError as exc:
            raise DecryptionError("bad ephemeral key") from exc
        return self.open(self._kdf(shared, eph_pub, recipient), body)


class FastProvider(Provider):
    """Keyed-hash stand-ins for the real primitives.

    Public keys are random handles; the matching secrets are only known to this
    provider object, so a party holding a handle can verify or encrypt but not
    sign or decrypt.
    """

    name = "fast"

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def _new_handle(self, rng: random.Random) -> KeyPair:
        secret = rng.randbytes(32)
        handle = sha256(b"handle" + secret)[:16]
        self._secrets[handle] = secret
        return KeyPair(handle, secret)

    def sig_keygen(self, rng: random.Random) -> KeyPair:
        return self._new_handle(rng)

    def sign(self, private: bytes, data: bytes) -> bytes:
        return hmac.new(private, b"sig" + data, hashlib.sha256).digest()

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        secret = self._secrets.get(public)
        if secret is None:
            return False
        return hmac.compare_digest(self.sign(secret, data), signature)

    @staticmethod
    def _keystream(key: bytes, nonce: bytes, length: int) -> bytes:
        out = bytearray()
        block = 0
        while len(out) < length:
            out += hashlib.sha256(key + nonce + block.to_bytes(4, "big")).digest()
            block += 1
        return bytes(out[:length])

    def seal(self, key: bytes, plaintext: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(NONCE_SIZE)
        body = bytes(a ^ b for a, b in zip(plaintext, self._keystream(key, nonce, len(plaintext))))
        tag = hmac.new(key, b"tag" + nonce + body, hashlib.sha256).digest()[:TAG_SIZE]
        return nonce + body + tag

    def open(self, key: bytes, ciphertext: bytes) -> bytes:
        if len(ciphertext) < NONCE_SIZE + TAG_SIZE:
            raise DecryptionError("ciphertext too short")
        nonce, body, tag = ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:-TAG_SIZE], ciphertext[-TAG_SIZE:]
        expect = hmac.new(key, b"tag" + nonce + body, hashlib.sha256).digest()[:TAG_SIZE]
        if not hmac.compare_digest(expect, tag):
            raise DecryptionError("authentication failed")
        return bytes(a ^ b for a, b in zip(body, self._keystream(key, nonce, len(body))))

    def pke_keygen(self, rng: random.Random) -> KeyPair:
        return self._new_handle(rng)

    def enc(self, public: bytes, data: bytes, rng: random.Random) -> bytes:
        secret = self._secrets.get(public)
        if secret is None:
            raise ValueError("unknown public key")
        return self.seal(sha256(b"pke" + secret)[:KEY_SIZE], data, rng)

    def dec(self, private: bytes, ciphertext: bytes) -> bytes:
        return self.open(sha256(b"pke" + private)[:KEY_SIZE], ciphertext)


def make_provider(name: str) -> Provider:
    if name == "real":
        return RealProvider()
    if name == "fast":
        return FastProvider()
    raise ValueError(f"unknown crypto provider {name!r}")


# --- XOR sharing -----------------------------------------------------------


def xor_bytes(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def xor_all(chunks: Iterable[bytes], size: int = SECRET_SIZE) -> bytes:
    acc = 0
    for chunk in chunks:
        acc ^= int.from_bytes(chunk, "big")
    return acc.to_bytes(size, "big")


def xor_split(secret: bytes, m: int, rng: random.Random) -> list[bytes]:
    """Split into ``m`` shares: ``m-1`` fresh random ones and an XOR correction."""
    if m < 1:
        raise ValueError("share count must be at least 1")
    shares = [rng.randbytes(len(secret)) for _ in range(m - 1)]
    shares.append(xor_all([secret, *shares], len(secret)))
    return shares


def xor_combine(shares: Sequence[bytes]) -> bytes:
    if not shares:
        raise ValueError("no shares")
    return xor_all(shares, len(shares[0]))


# --- Shamir sharing ----------------------------------------------------------


@dataclass(frozen=True)
class ShamirShare:
    x: int
    y: int


def secret_to_int(secret: bytes) -> int:
    return int.from_bytes(secret, "big")


def int_to_secret(value: int) -> bytes:
    return value.to_bytes(SECRET_SIZE, "big")


def _check_points(points: Sequence[int], prime: int) -> None:
    seen = set()
    for x in points:
        x %= prime
        if x == 0:
            raise ValueError("evaluation point must be nonzero")
        if x in seen:
            raise ValueError("duplicate evaluation point")
        seen.add(x)


def shamir_share(
    secret: int,
    degree: int,
    points: Sequence[int],
    rng: random.Random,
    prime: int = SHAMIR_PRIME,
    coefficients: Sequence[int] | None = None,
) -> list[ShamirShare]:
    """Share ``secret`` with a random polynomial of the given degree.

    ``coefficients`` (a_1..a_degree) may be pinned for hand-checkable vectors.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if len(points) < degree + 1:
        raise ValueError("need at least degree+1 evaluation points")
    _check_points(points, prime)
    if coefficients is None:
        coefficients = [rng.randrange(prime) for _ in range(degree)]
    elif len(coefficients) != degree:
        raise ValueError("coefficient count must equal the degree")
    poly = [secret % prime, *coefficients]
    shares = []
    for x in points:
        y = 0
        for coef in reversed(poly):
            y = (y * x + coef) % prime
        shares.append(ShamirShare(x % prime, y))
    return shares


def lagrange_at_zero(xs: Sequence[int], prime: int = SHAMIR_PRIME) -> list[int]:
    """Weights w_i = prod_{j != i} x_j / (x_j - x_i) for interpolation at zero."""
    weights = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if j != i:
                num = num * xj % prime
                den = den * (xj - xi) % prime
        weights.append(num * pow(den, -1, prime) % prime)
    return weights


def shamir_reconstruct(
    shares: Sequence[ShamirShare], degree: int | None = None, prime: int = SHAMIR_PRIME
) -> int:
    """Recover the constant term from shares.

    With ``degree`` given, fewer than ``degree+1`` shares is an error and only
    the first ``degree+1`` are used.
    """
    if degree is not None:
        if len(shares) < degree + 1:
            raise ValueError(f"need {degree + 1} shares, got {len(shares)}")
        shares = shares[: degree + 1]
    if not shares:
        raise ValueError("no shares")
    xs = [s.x for s in shares]
    _check_points(xs, prime)
    weights = lagrange_at_zero(xs, prime)
    return sum(s.y * w for s, w in zip(shares, weights)) % prime
