"""Closed-loop client: signs requests, retries by broadcast, verifies replies."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from . import messages as m
from .effects import Outbox
from .primitives import Provider
from .tee import ASSIGN, COMMIT, KeyRegistry, commitment_digest, verify_assignment


class ClientBusy(RuntimeError):
    """A second request was submitted while one is still pending."""


def verify_reply(provider: Provider, registry: KeyRegistry, n: int, request: m.Request, reply: m.Reply) -> int:
    """Run the five reply checks; returns 0 on success or the number of the failed check.

    1. the commitment for s_c is a valid TEE binding of the view's primary,
    2. the request digest is bound by the same TEE at the same counter,
    3. so the request is tied to s_c,
    4. s_c opens that commitment,
    5. s_{c+1} opens the commitment at c+1, where the result is also bound.
    """
    c0, p, c1, rb = reply.commitment, reply.prepare, reply.next_commitment, reply.result_binding
    if reply.request != request:
        return 3
    v = p.v
    primary = v % n
    if c0.kind != COMMIT or c0.issuer != primary or not verify_assignment(provider, registry, c0):
        return 1
    if p.kind != ASSIGN or p.issuer != primary or p.digest != m.request_digest(request):
        return 2
    if not verify_assignment(provider, registry, p):
        return 2
    if (p.c, p.v) != (c0.c, c0.v):
        return 3
    if commitment_digest(provider, reply.secret, c0.c, c0.v) != c0.digest:
        return 4
    if c1.kind != COMMIT or c1.issuer != primary or (c1.c, c1.v) != (c0.c + 1, v):
        return 5
    if rb.kind != ASSIGN or rb.issuer != primary or (rb.c, rb.v) != (c1.c, v):
        return 5
    if rb.digest != m.result_digest(request, reply.result):
        return 5
    if not (verify_assignment(provider, registry, c1) and verify_assignment(provider, registry, rb)):
        return 5
    if commitment_digest(provider, reply.next_secret, c1.c, v) != c1.digest:
        return 5
    return 0


@dataclass
class Accepted:
    rid: str
    result: str
    view: int
    counter: int


@dataclass
class Client:
    cid: int
    n: int
    provider: Provider
    registry: KeyRegistry
    rng: random.Random
    timeout: float = 10.0
    keypair: object = None
    view: int = 0
    seq: int = 0
    pending: Optional[m.Request] = None
    accepted: list[Accepted] = field(default_factory=list)
    rejected: int = 0
    out: Outbox = field(default_factory=Outbox)

    def __post_init__(self) -> None:
        if self.keypair is None:
            self.keypair = self.provider.sig_keygen(self.rng)

    @property
    def verify_key(self) -> bytes:
        return self.keypair.public

    def submit(self, op: str) -> list:
        if self.pending is not None:
            raise ClientBusy(f"client {self.cid} already has request {self.pending.rid} pending")
        self.seq += 1
        unsigned = m.Request(self.cid, self.seq, op, b"")
        sig = self.provider.sign(self.keypair.private, m.request_payload(unsigned))
        self.pending = m.Request(self.cid, self.seq, op, sig)
        self.out.send(self.view % self.n, self.pending)
        self.out.set_timer(("client", self.seq), self.timeout)
        return self.out.drain()

    def on_timer(self, key) -> list:
        if self.pending is not None and key == ("client", self.pending.seq):
            for r in range(self.n):
                self.out.send(r, self.pending)
            self.out.set_timer(key, self.timeout)
        return self.out.drain()

    def on_message(self, src: int, msg) -> list:
        if not isinstance(msg, m.Reply) or self.pending is None:
            return []
        if msg.request.seq != self.pending.seq:
            return []
        if verify_reply(self.provider, self.registry, self.n, self.pending, msg) != 0:
            self.rejected += 1
            return []
        req = self.pending
        self.pending = None
        self.view = max(self.view, msg.prepare.v)
        self.accepted.append(Accepted(req.rid, msg.result, msg.prepare.v, msg.prepare.c))
        self.out.cancel_timer(("client", req.seq))
        self.out.notice("accepted", (req.rid, msg.result))
        return self.out.drain()
