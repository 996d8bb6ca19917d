"""Wire messages exchanged by replicas and clients.

Every message type carries a one-octet ``TAG``; :func:`encode` prefixes it to
the canonical field encoding from :mod:`fastbft.wire`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from . import wire
from .primitives import sha256
from .tee import CounterAssignment, CounterAttestation, ShareBlob
from .topology import TreeTopology

# Log record kinds.
REC_PREPARE = 0
REC_RESULT = 1
REC_TREE = 2
REC_OPAQUE = 3

MODE_NORMAL = 0
MODE_FALLBACK = 1


@dataclass(frozen=True)
class Request:
    TAG = 1
    client: int
    seq: int
    op: str
    signature: bytes

    @property
    def rid(self) -> str:
        return f"{self.client}:{self.seq}"

    def body(self) -> bytes:
        return wire.encode_record(Request(self.client, self.seq, self.op, b""))


def request_digest(req: Request) -> bytes:
    return sha256(b"REQ" + wire.encode_record(req))


def result_digest(req: Request, result: str) -> bytes:
    return sha256(b"RES" + wire.encode_record(req) + result.encode())


def tree_digest(old: TreeTopology | None, new: TreeTopology | None) -> bytes:
    enc = lambda t: b"" if t is None else t.encode()  # noqa: E731
    return sha256(b"TREE" + wire.encode_value(enc(old), bytes) + wire.encode_value(enc(new), bytes))


@dataclass(frozen=True)
class Prepare:
    TAG = 2
    request: Request
    binding: CounterAssignment

    def counters(self) -> list[int]:
        return [self.binding.c]


@dataclass(frozen=True)
class Share:
    TAG = 3
    c: int
    v: int
    epoch: int
    sender: int
    share: bytes


@dataclass(frozen=True)
class Commit:
    TAG = 4
    secret: bytes
    result: str
    binding: CounterAssignment

    def counters(self) -> list[int]:
        return [self.binding.c]


@dataclass(frozen=True)
class Reply:
    TAG = 5
    request: Request
    secret: bytes
    commitment: CounterAssignment
    prepare: CounterAssignment
    result: str
    next_secret: bytes
    next_commitment: CounterAssignment
    result_binding: CounterAssignment

    def counters(self) -> list[int]:
        return [self.prepare.c, self.result_binding.c]


@dataclass(frozen=True)
class Suspect:
    TAG = 6
    accused: int
    accuser: int
    v: int
    epoch: int


@dataclass(frozen=True)
class NewTree:
    TAG = 7
    old: TreeTopology
    new: TreeTopology
    binding: CounterAssignment
    prior: tuple[CounterAssignment, ...]

    def counters(self) -> list[int]:
        return [b.c for b in self.prior] + [self.binding.c]


@dataclass(frozen=True)
class LogRecord:
    kind: int
    binding: CounterAssignment
    request: Optional[Request]
    result: str
    old_tree: Optional[TreeTopology]
    new_tree: Optional[TreeTopology]

    def content_digest(self) -> bytes | None:
        if self.kind == REC_PREPARE and self.request is not None:
            return request_digest(self.request)
        if self.kind == REC_RESULT and self.request is not None:
            return result_digest(self.request, self.result)
        if self.kind == REC_TREE:
            return tree_digest(self.old_tree, self.new_tree)
        return None


@dataclass(frozen=True)
class Checkpoint:
    c: int
    v: int
    state_digest: bytes


@dataclass(frozen=True)
class ReqViewChange:
    TAG = 8
    sender: int
    target: int
    transition: bool
    mode: int
    checkpoint: Checkpoint
    log: tuple[LogRecord, ...]
    attestation: CounterAttestation

    def log_bytes(self) -> bytes:
        return log_bytes(self.target, self.transition, self.mode, self.checkpoint, self.log)


def log_bytes(target: int, transition: bool, mode: int, checkpoint: Checkpoint, log) -> bytes:
    return (
        wire.encode_value(target, int)
        + wire.encode_value(transition, bool)
        + wire.encode_value(mode, int)
        + wire.encode_record(checkpoint)
        + wire.encode_value(tuple(log), tuple[LogRecord, ...])
    )


@dataclass(frozen=True)
class NewView:
    TAG = 9
    target: int
    mode: int
    tree: Optional[TreeTopology]
    history: tuple[LogRecord, ...]
    base: int
    binding: CounterAssignment
    proofs: tuple[ReqViewChange, ...]


def view_digest(target: int, mode: int, tree: TreeTopology | None, history, base: int) -> bytes:
    return sha256(
        b"VIEW"
        + wire.encode_value(target, int)
        + wire.encode_value(mode, int)
        + wire.encode_value(b"" if tree is None else tree.encode(), bytes)
        + wire.encode_value(tuple(history), tuple[LogRecord, ...])
        + wire.encode_value(base, int)
    )


@dataclass(frozen=True)
class ViewChange:
    TAG = 10
    sender: int
    target: int
    digest: bytes
    attestation: CounterAttestation


@dataclass(frozen=True)
class Rejoin:
    TAG = 11
    sender: int
    nonce: int


@dataclass(frozen=True)
class RejoinReply:
    TAG = 12
    sender: int
    nonce: int
    snapshot: bytes
    attestation: CounterAttestation


@dataclass(frozen=True)
class FallbackPrepare:
    TAG = 13
    request: Request
    binding: CounterAssignment

    def counters(self) -> list[int]:
        return [self.binding.c]


@dataclass(frozen=True)
class FallbackShare:
    TAG = 14
    c: int
    v: int
    sender: int
    x: int
    y: bytes


@dataclass(frozen=True)
class FallbackCommit:
    TAG = 15
    secret: bytes
    result: str
    binding: CounterAssignment

    def counters(self) -> list[int]:
        return [self.binding.c]


@dataclass(frozen=True)
class Blobs:
    TAG = 16
    v: int
    epoch: int
    blobs: tuple[ShareBlob, ...]
    # Recipient's encrypted view key, present once the sender is primary of v.
    grant: Optional[bytes]


@dataclass(frozen=True)
class Fetch:
    TAG = 17
    sender: int
    v: int
    after: int


@dataclass(frozen=True)
class Probe:
    TAG = 18
    v: int
    nonce: int


@dataclass(frozen=True)
class ProbeAck:
    TAG = 19
    sender: int
    v: int
    nonce: int


Message = Union[
    Request, Prepare, Share, Commit, Reply, Suspect, NewTree, ReqViewChange, NewView,
    ViewChange, Rejoin, RejoinReply, FallbackPrepare, FallbackShare, FallbackCommit,
    Blobs, Fetch, Probe, ProbeAck,
]

MESSAGE_TYPES: dict[int, type] = {
    cls.TAG: cls
    for cls in (
        Request, Prepare, Share, Commit, Reply, Suspect, NewTree, ReqViewChange, NewView,
        ViewChange, Rejoin, RejoinReply, FallbackPrepare, FallbackShare, FallbackCommit,
        Blobs, Fetch, Probe, ProbeAck,
    )
}

TAG_NAMES = {
    Request: "REQUEST", Prepare: "PREPARE", Share: "SHARE", Commit: "COMMIT", Reply: "REPLY",
    Suspect: "SUSPECT", NewTree: "NEW-TREE", ReqViewChange: "REQ-VIEW-CHANGE",
    NewView: "NEW-VIEW", ViewChange: "VIEW-CHANGE", Rejoin: "REJOIN",
    RejoinReply: "REJOIN-REPLY", FallbackPrepare: "FALLBACK-PREPARE",
    FallbackShare: "FALLBACK-SHARE", FallbackCommit: "FALLBACK-COMMIT", Blobs: "BLOBS",
    Fetch: "FETCH", Probe: "PROBE", ProbeAck: "PROBE-ACK",
}


def tag_name(msg) -> str:
    return TAG_NAMES[type(msg)]


def encode(msg) -> bytes:
    return bytes([msg.TAG]) + wire.encode_record(msg)


def decode(data: bytes):
    if not data:
        raise wire.WireError("empty message")
    cls = MESSAGE_TYPES.get(data[0])
    if cls is None:
        raise wire.WireError(f"unknown tag {data[0]}")
    return wire.decode_record(cls, data[1:])


def request_payload(req: Request) -> bytes:
    """Bytes a client signs for a request."""
    return b"FBFT-REQ" + req.body()
