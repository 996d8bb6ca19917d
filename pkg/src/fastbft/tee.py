"""Emulated trusted execution environment, one per replica.

The enclave owns the signing/decryption keys, the view keys and the virtual
counter.  Untrusted replica code (honest or scripted-Byzantine) only reaches
that state through the methods below.

Counter bindings come in two signed flavours that can never be confused:
``ASSIGN`` (from :meth:`TEE.request_counter`, one digest per counter value) and
``COMMIT`` (the preprocessing commitment to a secret).  Attestations of the
current counter use a third domain, ``ATTEST``.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Sequence

from . import primitives as prim
from .config import SHAMIR_PRIME
from .topology import TreeTopology

ASSIGN = 0
COMMIT = 1

_BLOB_XOR = 0
_BLOB_SHAMIR = 1


class TeeError(Exception):
    """A refused enclave call; ``reason`` mirrors the pseudocode's return strings."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@total_ordering
@dataclass(frozen=True)
class CounterValue:
    c: int
    v: int

    def key(self) -> tuple[int, int]:
        return (self.v, self.c)

    def __lt__(self, other: "CounterValue") -> bool:
        return self.key() < other.key()


@dataclass(frozen=True)
class CounterAssignment:
    issuer: int
    kind: int
    digest: bytes
    c: int
    v: int
    signature: bytes = field(repr=False)

    @property
    def counter(self) -> CounterValue:
        return CounterValue(self.c, self.v)

    def payload(self) -> bytes:
        return assignment_payload(self.issuer, self.kind, self.digest, self.c, self.v)


def assignment_payload(issuer: int, kind: int, digest: bytes, c: int, v: int) -> bytes:
    return b"FBFT-ASSIGN" + struct.pack(">QB", issuer, kind) + digest + struct.pack(">QQ", c, v)


@dataclass(frozen=True)
class CounterAttestation:
    """Signed report of a TEE's current (c_latest, v) and primary over a host digest."""

    issuer: int
    digest: bytes
    c: int
    v: int
    primary: int
    freeze: bool
    signature: bytes = field(repr=False)

    def payload(self) -> bytes:
        return b"FBFT-ATTEST" + struct.pack(">QB", self.issuer, self.freeze) + self.digest + struct.pack(
            ">QQQ", self.c, self.v, self.primary
        )


@dataclass(frozen=True)
class ShareBlob:
    """Sealed share for one recipient; ``c``/``v`` are routing hints only."""

    recipient: int
    c: int
    v: int
    ciphertext: bytes


@dataclass(frozen=True)
class ShareRelease:
    share: bytes | prim.ShamirShare
    child_digests: dict[int, bytes]
    commitment: bytes
    counter: CounterValue


@dataclass
class SecretPackage:
    counter: CounterValue
    commitment: bytes
    binding: CounterAssignment
    blobs: dict[int, ShareBlob]


@dataclass
class _Internal:
    secret: bytes
    commitment: bytes
    binding: CounterAssignment
    own: bytes | prim.ShamirShare
    child_digests: dict[int, bytes]
    released: bool = False


@dataclass
class HardwareCounter:
    """Slow platform monotonic counter; survives reboots."""

    value: int = 0


@dataclass
class OpCounter:
    rand_draws: int = 0
    xor_ops: int = 0
    hashes: int = 0
    field_mults: int = 0

    def share_ops(self, shamir: bool = False) -> int:
        return self.field_mults if shamir else self.rand_draws + self.xor_ops


@dataclass
class KeyRegistry:
    """Static table of certified TEE public keys (stands in for attestation)."""

    verify_keys: dict[int, bytes] = field(default_factory=dict)
    enc_keys: dict[int, bytes] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.verify_keys)

    @property
    def f(self) -> int:
        return (self.n - 1) // 2

    def verify(self, provider: prim.Provider, issuer: int, payload: bytes, signature: bytes) -> bool:
        key = self.verify_keys.get(issuer)
        return key is not None and provider.verify(key, payload, signature)


def commitment_digest(provider: prim.Provider, secret: bytes, c: int, v: int) -> bytes:
    """h_c = H(<s_c, (c, v)>)."""
    return provider.hash(secret + struct.pack(">QQ", c, v))


def verify_assignment(
    provider: prim.Provider, registry: KeyRegistry, binding: CounterAssignment
) -> bool:
    return registry.verify(provider, binding.issuer, binding.payload(), binding.signature)


def verify_attestation(
    provider: prim.Provider, registry: KeyRegistry, att: CounterAttestation
) -> bool:
    return registry.verify(provider, att.issuer, att.payload(), att.signature)


def _encode_xor_blob(share: bytes, c: int, v: int, digests: dict[int, bytes], h: bytes) -> bytes:
    parts = [bytes([_BLOB_XOR]), share, struct.pack(">QQ", c, v), h, struct.pack(">I", len(digests))]
    for j in sorted(digests):
        parts.append(struct.pack(">Q", j) + digests[j])
    return b"".join(parts)


def _encode_shamir_blob(share: prim.ShamirShare, c: int, v: int, h: bytes) -> bytes:
    return (
        bytes([_BLOB_SHAMIR])
        + struct.pack(">Q", share.x)
        + share.y.to_bytes(17, "big")
        + struct.pack(">QQ", c, v)
        + h
    )


def _decode_blob(data: bytes):
    kind = data[0]
    if kind == _BLOB_XOR:
        share = data[1:17]
        c, v = struct.unpack_from(">QQ", data, 17)
        h = data[33:65]
        (count,) = struct.unpack_from(">I", data, 65)
        digests = {}
        for k in range(count):
            off = 69 + 40 * k
            (j,) = struct.unpack_from(">Q", data, off)
            digests[j] = data[off + 8 : off + 40]
        return share, c, v, digests, h
    if kind == _BLOB_SHAMIR:
        (x,) = struct.unpack_from(">Q", data, 1)
        y = int.from_bytes(data[9:26], "big")
        c, v = struct.unpack_from(">QQ", data, 26)
        h = data[42:74]
        return prim.ShamirShare(x, y), c, v, {}, h
    raise ValueError("unknown blob kind")


def fallback_point(replica: int) -> int:
    """Evaluation point of a replica in the fallback sharing (1..n)."""
    return replica + 1


class TEE:
    def __init__(
        self,
        replica_id: int,
        provider: prim.Provider,
        rng: random.Random,
        hardware: HardwareCounter | None = None,
        prime: int = SHAMIR_PRIME,
    ) -> None:
        self.id = replica_id
        self.provider = provider
        self._rng = rng
        self._sig = provider.sig_keygen(rng)
        self._pke = provider.pke_keygen(rng)
        self.hardware = hardware if hardware is not None else HardwareCounter()
        self.prime = prime
        self.registry = KeyRegistry()
        self.ops = OpCounter()
        # Audit trail of every ASSIGN signature; not enclave state, survives reboots.
        self.issued: list[CounterAssignment] = []
        self.released: list[CounterValue] = []
        # Plaintext secrets per counter, kept only for the simulator's oracle checks.
        self.secret_ledger: dict[tuple[int, int], bytes] = {}
        self._reset_volatile()
        self.primary = 0
        self._view_key: bytes | None = None
        self.locked = False
        self.stopped = False
        self.frozen = False

    # -- setup -------------------------------------------------------------

    @property
    def verify_key(self) -> bytes:
        return self._sig.public

    @property
    def enc_key(self) -> bytes:
        return self._pke.public

    def install_registry(self, registry: KeyRegistry) -> None:
        self.registry = registry

    def genesis(self, members: Sequence[int], tree: TreeTopology | None, view_keys: dict[int, bytes]) -> None:
        """Install the initial configuration (view 0) agreed out of band."""
        self.primary = tree.root if tree is not None else 0
        self._view_key = view_keys.get(self.id)
        if self.primary == self.id:
            self._members = dict(view_keys)
            self._tree = tree

    def _reset_volatile(self) -> None:
        self.c_latest = 0
        self.v = 0
        self._members: dict[int, bytes] = {}
        self._tree: TreeTopology | None = None
        self._packages: dict[int, _Internal] = {}
        self._prepared_upto = 0
        self._powers: dict[int, list[int]] = {}

    def _check_running(self) -> None:
        if self.locked or self.stopped:
            raise TeeError("locked")

    def _sign(self, payload: bytes) -> bytes:
        return self.provider.sign(self._sig.private, payload)

    def _assignment(self, kind: int, digest: bytes, c: int) -> CounterAssignment:
        sig = self._sign(assignment_payload(self.id, kind, digest, c, self.v))
        out = CounterAssignment(self.id, kind, digest, c, self.v, sig)
        if kind == ASSIGN:
            self.issued.append(out)
        return out

    def _check_binding(self, binding: CounterAssignment, kind: int) -> None:
        if (
            binding.kind != kind
            or binding.issuer != self.primary
            or not verify_assignment(self.provider, self.registry, binding)
        ):
            raise TeeError("invalid signature")

    # -- view management -------------------------------------------------------

    def be_primary(
        self, members: Sequence[int], tree: TreeTopology | None, view: int | None = None
    ) -> dict[int, bytes]:
        self._check_running()
        new_view = self.v + 1 if view is None else view
        if new_view <= self.v:
            raise TeeError("invalid view")
        self._members = {}
        self._tree = tree
        self.frozen = False
        self.v = new_view
        self.c_latest = 0
        self._packages = {}
        self._prepared_upto = 0
        self.primary = self.id
        out = {}
        for i in members:
            k = self._rng.randbytes(prim.KEY_SIZE)
            self._members[i] = k
            out[i] = self.provider.enc(self.registry.enc_keys[i], k + struct.pack(">Q", new_view), self._rng)
        self._view_key = self._members.get(self.id)
        return out

    def _open_grant(self, omega: bytes, view: int) -> bytes:
        try:
            pt = self.provider.dec(self._pke.private, omega)
        except prim.DecryptionError:
            raise TeeError("invalid enc") from None
        if len(pt) != prim.KEY_SIZE + 8 or struct.unpack(">Q", pt[prim.KEY_SIZE:])[0] != view:
            raise TeeError("invalid enc")
        return pt[: prim.KEY_SIZE]

    def accept_view_key(self, omega: bytes) -> None:
        """Install this replica's view key for the current view from an ω grant."""
        self._check_running()
        self._view_key = self._open_grant(omega, self.v)

    def update_view(
        self, binding: CounterAssignment, omega: bytes | None, view: int | None = None
    ) -> None:
        self._check_running()
        if binding.kind != ASSIGN or not verify_assignment(self.provider, self.registry, binding):
            raise TeeError("invalid signature")
        new_view = self.v + 1 if view is None else view
        if self.registry.n and binding.issuer != new_view % self.registry.n:
            raise TeeError("invalid signature")
        if binding.v != self.v or binding.c != self.c_latest + 1:
            raise TeeError("invalid counter")
        if new_view <= self.v:
            raise TeeError("invalid counter")
        key = None if omega is None else self._open_grant(omega, new_view)
        self.c_latest = 0
        self.v = new_view
        self.frozen = False
        self.primary = binding.issuer
        self._view_key = key
        self._members = {}
        self._tree = None
        self._packages = {}
        self._prepared_upto = 0

    def install_tree(self, tree: TreeTopology) -> None:
        """Record a reshaped tree; unused packages built for the old tree are dropped."""
        self._check_running()
        if self.primary != self.id or tree.root != self.id:
            raise TeeError("not primary")
        if any(i not in self._members for i in tree.nodes):
            raise TeeError("tree node without a view key")
        self._tree = tree
        self._packages = {c: p for c, p in self._packages.items() if c <= self.c_latest}
        self._prepared_upto = self.c_latest

    @property
    def tree(self) -> TreeTopology | None:
        return self._tree

    @property
    def has_view_key(self) -> bool:
        return self._view_key is not None

    # -- preprocessing -----------------------------------------------------------

    def _next_counters(self, m: int) -> range:
        start = max(self.c_latest, self._prepared_upto)
        self._prepared_upto = start + m
        return range(start + 1, start + m + 1)

    def preprocessing(self, m: int) -> list[SecretPackage]:
        self._check_running()
        if self.primary != self.id or self._tree is None:
            raise TeeError("not primary")
        tree = self._tree
        ops = self.ops
        out = []
        for c in self._next_counters(m):
            secret = self._rng.randbytes(prim.SECRET_SIZE)
            h = commitment_digest(self.provider, secret, c, self.v)
            shares = prim.xor_split(secret, len(tree), self._rng)
            ops.rand_draws += len(tree) - 1
            ops.xor_ops += len(tree) - 1
            share_of = dict(zip(tree.order, shares))
            subtree = dict(share_of)
            for node in reversed(tree.order):
                parent = tree.parent(node)
                if parent is not None:
                    subtree[parent] = prim.xor_bytes(subtree[parent], subtree[node])
                    ops.xor_ops += 1
            digest_of = {}
            for node in tree.order[1:]:
                digest_of[node] = self.provider.hash(subtree[node])
                ops.hashes += 1
            blobs = {}
            for node in tree.order[1:]:
                kids = {j: digest_of[j] for j in tree.children(node)}
                pt = _encode_xor_blob(share_of[node], c, self.v, kids, h)
                blobs[node] = ShareBlob(node, c, self.v, self.provider.seal(self._members[node], pt, self._rng))
            binding = self._assignment(COMMIT, h, c)
            own_kids = {j: digest_of[j] for j in tree.children(self.id)}
            self._packages[c] = _Internal(secret, h, binding, share_of[self.id], own_kids)
            self.secret_ledger[(c, self.v)] = secret
            out.append(SecretPackage(CounterValue(c, self.v), h, binding, blobs))
        return out

    def _point_powers(self, x: int, degree: int) -> list[int]:
        powers = self._powers.get(x)
        if powers is None or len(powers) < degree:
            powers = [1]
            for _ in range(degree):
                powers.append(powers[-1] * x % self.prime)
            self._powers[x] = powers
        return powers

    def preprocessing_fallback(self, m: int) -> list[SecretPackage]:
        """Shamir-shared secrets over all registered replicas, threshold f+1."""
        self._check_running()
        if self.primary != self.id or not self._members:
            raise TeeError("not primary")
        replicas = sorted(self.registry.verify_keys)
        degree = self.registry.f
        p = self.prime
        ops = self.ops
        out = []
        for c in self._next_counters(m):
            secret_int = self._rng.randrange(1 << (8 * prim.SECRET_SIZE))
            secret = prim.int_to_secret(secret_int)
            h = commitment_digest(self.provider, secret, c, self.v)
            coeffs = [secret_int] + [self._rng.randrange(p) for _ in range(degree)]
            shares = {}
            for r in replicas:
                x = fallback_point(r)
                powers = self._point_powers(x, degree)
                y = coeffs[0]
                for k in range(1, degree + 1):
                    y = (y + coeffs[k] * powers[k]) % p
                ops.field_mults += degree
                shares[r] = prim.ShamirShare(x, y)
            blobs = {}
            for r in replicas:
                if r == self.id or r not in self._members:
                    continue
                pt = _encode_shamir_blob(shares[r], c, self.v, h)
                blobs[r] = ShareBlob(r, c, self.v, self.provider.seal(self._members[r], pt, self._rng))
            binding = self._assignment(COMMIT, h, c)
            self._packages[c] = _Internal(secret, h, binding, shares[self.id], {})
            self.secret_ledger[(c, self.v)] = secret
            out.append(SecretPackage(CounterValue(c, self.v), h, binding, blobs))
        return out

    # -- counters --------------------------------------------------------------

    def request_counter(self, x: bytes) -> CounterAssignment:
        self._check_running()
        self.c_latest += 1
        return self._assignment(ASSIGN, x, self.c_latest)

    def primary_share(self, c: int) -> ShareRelease:
        """Release the primary's own share for an already-bound counter, once."""
        self._check_running()
        pkg = self._packages.get(c)
        if self.primary != self.id or pkg is None or c > self.c_latest or pkg.released:
            raise TeeError("invalid counter value")
        pkg.released = True
        return ShareRelease(pkg.own, dict(pkg.child_digests), pkg.commitment, CounterValue(c, self.v))

    def commitment_binding(self, c: int) -> CounterAssignment:
        pkg = self._packages.get(c)
        if pkg is None:
            raise TeeError("invalid counter value")
        return pkg.binding

    def _check_thawed(self) -> None:
        if self.frozen:
            raise TeeError("frozen")

    def verify_counter(self, binding: CounterAssignment, blob: ShareBlob) -> ShareRelease:
        self._check_running()
        self._check_thawed()
        self._check_binding(binding, ASSIGN)
        if self._view_key is None:
            raise TeeError("invalid enc")
        try:
            pt = self.provider.open(self._view_key, blob.ciphertext)
            share, c2, v2, digests, h = _decode_blob(pt)
        except (prim.DecryptionError, ValueError, struct.error):
            raise TeeError("invalid enc") from None
        if (binding.c, binding.v) != (c2, v2):
            raise TeeError("invalid counter value")
        if binding.v != self.v or binding.c != self.c_latest + 1:
            raise TeeError("invalid counter value")
        self.c_latest += 1
        cv = CounterValue(c2, v2)
        self.released.append(cv)
        return ShareRelease(share, digests, h, cv)

    def update_counter(self, secret: bytes, binding: CounterAssignment) -> None:
        self._check_running()
        self._check_thawed()
        self._check_binding(binding, COMMIT)
        if binding.v != self.v or binding.c != self.c_latest + 1:
            raise TeeError("invalid counter")
        if commitment_digest(self.provider, secret, binding.c, binding.v) != binding.digest:
            raise TeeError("invalid secret")
        self.c_latest += 1

    def advance_counter(self, binding: CounterAssignment) -> None:
        """Account for a counter the primary spent without revealing a secret."""
        self._check_running()
        # Any registered TEE may have spent the counter (the primary, or a
        # view-change leader signing its NEW-VIEW).
        if binding.kind != ASSIGN or not verify_assignment(self.provider, self.registry, binding):
            raise TeeError("invalid signature")
        if binding.v != self.v or binding.c != self.c_latest + 1:
            raise TeeError("invalid counter")
        self.c_latest += 1

    def attest(self, x: bytes, freeze: bool = False) -> CounterAttestation:
        """Sign the current counter over ``x``.

        With ``freeze`` the TEE stops releasing shares or accepting secrets in
        the current view; only moving to a later view lifts it.
        """
        self._check_running()
        if freeze:
            self.frozen = True
        att = CounterAttestation(self.id, x, self.c_latest, self.v, self.primary, freeze, b"")
        return CounterAttestation(
            self.id, x, self.c_latest, self.v, self.primary, freeze, self._sign(att.payload())
        )

    # -- persistence and recovery ----------------------------------------------------

    def persist_then_stop(self) -> bytes:
        self.hardware.value += 1
        self.stopped = True
        return struct.pack(">QQQ", self.hardware.value, self.c_latest, self.v)

    def restore(self, record: bytes | None) -> bool:
        """Boot from a persisted record; returns True when running, False when locked."""
        primary = self.primary
        was_locked = self.locked
        self._reset_volatile()
        self.stopped = False
        self.frozen = False
        # Lockout survives reboots; only reset_counter lifts it.
        if not was_locked and record is not None and len(record) == 24:
            hw, c, v = struct.unpack(">QQQ", record)
            if hw == self.hardware.value:
                # Consume the record so a later replay of it fails.
                self.hardware.value += 1
                self.c_latest, self.v, self.primary = c, v, primary
                self.locked = False
                return True
        self.locked = True
        return False

    def reset_counter(self, evidence: Sequence[tuple[bytes, CounterAttestation]]) -> bool:
        """Leave lockout given f+1 consistent attestations from distinct peers."""
        if not self.locked:
            return True
        groups: dict[tuple, set[int]] = {}
        for log, att in evidence:
            if att.issuer == self.id or not verify_attestation(self.provider, self.registry, att):
                continue
            if self.provider.hash(log) != att.digest:
                continue
            groups.setdefault((att.digest, att.c, att.v, att.primary), set()).add(att.issuer)
        for (digest, c, v, primary), issuers in sorted(groups.items(), key=lambda kv: -len(kv[1])):
            if len(issuers) >= self.registry.f + 1:
                if v != self.v:
                    self._view_key = None
                self.c_latest, self.v, self.primary = c, v, primary
                self.locked = False
                return True
        return False

    @property
    def status(self) -> str:
        if self.stopped:
            return "stopped"
        return "locked" if self.locked else "running"
