"""Replica state machine: normal case, failure detection and the fallback mode.

View change, rejoin and checkpointing live in :mod:`fastbft.recovery`.  Each
handler mutates the replica and queues effects in ``self.out``; the host drains
them after every call.
"""

from __future__ import annotations

import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import messages as m
from .app import KVStore
from .config import ProtocolConfig
from .effects import Outbox
from .primitives import ShamirShare, int_to_secret, secret_to_int, shamir_reconstruct
from .recovery import RecoveryMixin
from .tee import (
    ASSIGN,
    TEE,
    CounterAssignment,
    ShareRelease,
    TeeError,
    commitment_digest,
    fallback_point,
    verify_assignment,
)
from .topology import TopologyError, TreeTopology, build_tree, new_tree_after_suspect

PHASE_COMMIT = "commit"
PHASE_REPLY = "reply"


@dataclass
class Behaviour:
    """Scripted misbehaviour of the untrusted side; all off for a correct replica."""

    crashed: bool = False
    silent_shares: bool = False
    wrong_shares: bool = False
    primary_silent: bool = False
    equivocate: bool = False
    wrong_result: bool = False


@dataclass
class Aggregation:
    c: int
    v: int
    epoch: int
    phase: str
    acc: bytes
    expect: dict[int, bytes]
    pending: set[int]
    commitment: bytes


@dataclass
class InFlight:
    request: m.Request
    c: int
    prepare: CounterAssignment
    phase: str = PHASE_COMMIT
    secret: bytes = b""
    result: str = ""
    result_binding: Optional[CounterAssignment] = None


@dataclass
class FallbackRound:
    c: int
    phase: str
    commitment: bytes
    shares: dict[int, ShamirShare] = field(default_factory=dict)
    done: bool = False


class Replica(RecoveryMixin):
    def __init__(
        self,
        rid: int,
        n: int,
        config: ProtocolConfig,
        tee: TEE,
        client_keys: dict[int, bytes],
        rng: random.Random,
        delta: float = 1.0,
    ) -> None:
        self.id = rid
        self.n = n
        self.f = (n - 1) // 2
        self.cfg = config
        self.tee = tee
        self.provider = tee.provider
        self.registry = tee.registry
        self.client_keys = client_keys
        self.rng = rng
        self.delta = delta
        self.out = Outbox()
        self.behaviour = Behaviour()

        self.view = 0
        self.mode = m.MODE_NORMAL
        self.tree: TreeTopology | None = None
        self.epoch = 0
        self.app = KVStore()
        self.executed: list[str] = []
        self.log: list[m.LogRecord] = []
        self.checkpoint = m.Checkpoint(0, 0, self.app.digest())
        self.since_checkpoint = 0
        self.grants: dict[int, bytes] = {}
        self.pending_grants: dict[int, bytes] = {}

        self.blobs: dict[tuple[int, int, int], object] = {}
        self.buffer: list[tuple[int, object]] = []
        self.gap_armed = False
        self._draining = False
        self.early_shares: dict[tuple[int, int], list[m.Share]] = {}
        self.aggs: dict[int, Aggregation] = {}
        self.releases: dict[int, ShareRelease] = {}
        self.requests_at: dict[int, m.Request] = {}
        self.waiting: dict[str, m.Request] = {}
        self.replies: dict[int, m.Reply] = {}

        # primary side
        self.queue: deque[m.Request] = deque()
        self.inflight: InFlight | None = None
        self.packages: dict[int, object] = {}
        self.prepared_upto = 0
        self.since_reply: list[CounterAssignment] = []
        self.history: list[tuple[int, int, object]] = []
        self.suspects: list[m.Suspect] = []
        self.suspect_count = 0
        self.accused: set[int] = set()
        self.fb_rounds: dict[int, FallbackRound] = {}
        self.fallback_done = 0
        self.probe_nonce = 0
        self.probe_acks: set[int] = set()

        self._init_recovery()

    # -- helpers -------------------------------------------------------------

    @property
    def primary(self) -> int:
        return self.view % self.n

    @property
    def is_primary(self) -> bool:
        return self.primary == self.id

    @property
    def replicas(self) -> range:
        return range(self.n)

    @property
    def in_service(self) -> bool:
        return not self.behaviour.crashed and not self.rejoining and self.tee.status == "running"

    def is_active(self) -> bool:
        if self.mode == m.MODE_FALLBACK:
            return True
        return self.tree is not None and self.id in self.tree

    def _send(self, dst: int, msg) -> None:
        if dst != self.id:
            self.out.send(dst, msg)

    def _record(self, kind: int, binding: CounterAssignment, request=None, result="", old=None, new=None):
        self.log.append(m.LogRecord(kind, binding, request, result, old, new))

    def _client_ok(self, req: m.Request) -> bool:
        key = self.client_keys.get(req.client)
        return key is not None and self.provider.verify(key, m.request_payload(req), req.signature)

    def _primary_binding_ok(self, b: CounterAssignment) -> bool:
        return (
            b.kind == ASSIGN
            and b.issuer == self.primary
            and b.v == self.view
            and verify_assignment(self.provider, self.registry, b)
        )

    def _execute(self, req: m.Request, c: int, v: int) -> str:
        result, fresh = self.app.execute(req.client, req.seq, req.op)
        if fresh:
            self.executed.append(req.rid)
            self.out.notice("exec", (req.rid, v, c, result))
        return result

    def _done_waiting(self, rid: str) -> None:
        if self.waiting.pop(rid, None) is not None:
            self.out.cancel_timer(("req", rid))

    # -- genesis -------------------------------------------------------------

    def start(self, tree: TreeTopology | None) -> None:
        """Enter view 0 with the agreed initial tree."""
        self.tree = tree
        self.view = self.tee.v
        if self.is_primary:
            self._ensure_packages()

    # -- dispatch -------------------------------------------------------------

    def on_message(self, src: int, msg) -> list:
        if self.behaviour.crashed:
            return []
        if self.rejoining:
            if isinstance(msg, m.RejoinReply):
                self.on_rejoin_reply(src, msg)
            elif isinstance(msg, (m.ReqViewChange, m.NewView, m.ViewChange)):
                self.deferred.append((src, msg))
            elif hasattr(msg, "counters"):
                self.buffer.append((src, msg))
            return self.out.drain()
        self._dispatch(src, msg)
        return self.out.drain()

    def _dispatch(self, src: int, msg) -> None:
        handler = {
            m.Request: self.on_request,
            m.Share: self.on_share,
            m.Suspect: self.on_suspect,
            m.Blobs: self.on_blobs,
            m.Fetch: self.on_fetch,
            m.FallbackShare: self.on_fallback_share,
            m.Probe: self.on_probe,
            m.ProbeAck: self.on_probe_ack,
            m.ReqViewChange: self.on_req_view_change,
            m.NewView: self.on_new_view,
            m.ViewChange: self.on_view_change,
            m.Rejoin: self.on_rejoin,
            m.RejoinReply: self.on_rejoin_reply,
        }.get(type(msg))
        if handler is not None:
            handler(src, msg)
        elif hasattr(msg, "counters"):
            self.buffer.append((src, msg))
            self.drain()

    def on_timer(self, key) -> list:
        if self.behaviour.crashed:
            return []
        kind = key[0]
        if kind == "rejoin":
            self.on_rejoin_timer(key)
        elif self.rejoining:
            pass
        elif kind == "child":
            self.on_child_timeout(key)
        elif kind == "settle":
            self.on_settle(key)
        elif kind == "gap":
            self.on_gap_timer()
        elif kind == "req":
            self.on_request_timer(key)
        elif kind == "vc":
            self.on_vc_timer(key)
        elif kind == "lead":
            self.on_lead_timer(key)
        elif kind == "probe":
            self.on_probe_timer(key)
        return self.out.drain()

    # -- ordered processing of counter-bearing messages ------------------------

    def _view_of(self, msg) -> int:
        if isinstance(msg, m.Reply):
            return msg.prepare.v
        return msg.binding.v

    def _ready(self, msg) -> bool:
        if isinstance(msg, (m.Prepare, m.Commit, m.FallbackPrepare, m.FallbackCommit)):
            if self.is_active() and not self.is_primary:
                return self.tee.has_view_key and (msg.binding.v, self.epoch, msg.binding.c) in self.blobs
        return True

    def drain(self) -> None:
        if self._draining:
            return
        self._draining = True
        try:
            while self._drain_one():
                if self.rejoining:
                    break
        finally:
            self._draining = False
        if self.buffer and not self.gap_armed:
            self.gap_armed = True
            self.out.set_timer(("gap",), self.cfg.gap_timeout * self.delta)
        elif not self.buffer and self.gap_armed:
            self.gap_armed = False
            self.out.cancel_timer(("gap",))

    def _drain_one(self) -> bool:
        """Handle the first buffered message that is due; False if none is."""
        for k, (src, msg) in enumerate(self.buffer):
            v = self._view_of(msg)
            counters = msg.counters()
            c_latest = self.tee.c_latest
            if v < self.view or (v == self.view and max(counters) <= c_latest):
                del self.buffer[k]
                if isinstance(msg, m.Reply) and v == self.view:
                    self._note_reply(src, msg)
                return True
            if v > self.view or self.frozen or self.tee.status != "running":
                continue
            needed = [x for x in counters if x > c_latest]
            if needed != list(range(c_latest + 1, c_latest + 1 + len(needed))):
                continue
            if not self._ready(msg):
                continue
            del self.buffer[k]
            self._process(src, msg)
            return True
        return False

    def _process(self, src: int, msg) -> None:
        if src != self.primary:
            return
        if isinstance(msg, m.Prepare):
            self.on_prepare(msg)
        elif isinstance(msg, m.Commit):
            self.on_commit(msg)
        elif isinstance(msg, m.Reply):
            self.on_reply(msg)
        elif isinstance(msg, m.NewTree):
            self.on_new_tree(msg)
        elif isinstance(msg, m.FallbackPrepare):
            self.on_fallback_prepare(msg)
        elif isinstance(msg, m.FallbackCommit):
            self.on_fallback_commit(msg)

    def on_gap_timer(self) -> None:
        self.gap_armed = False
        if not self.buffer:
            return
        if any(self._view_of(msg) > self.view for _, msg in self.buffer) and not self.frozen:
            # A whole view change passed us by; recover through state transfer.
            self.begin_rejoin()
            return
        if not self.frozen:
            self._send(self.primary, m.Fetch(self.id, self.view, self.tee.c_latest))
        self.gap_armed = True
        self.out.set_timer(("gap",), self.cfg.gap_timeout * self.delta)

    def on_blobs(self, src: int, msg: m.Blobs) -> None:
        if src != msg.v % self.n or msg.v < self.view:
            return
        for blob in msg.blobs:
            if blob.recipient == self.id:
                self.blobs[(msg.v, msg.epoch, blob.c)] = blob
        if msg.grant is not None:
            self.pending_grants[msg.v] = msg.grant
            self._take_grant()
        self.drain()

    def _take_grant(self) -> None:
        grant = self.pending_grants.get(self.view)
        if grant is None or self.tee.has_view_key or self.tee.v != self.view or self.frozen:
            return
        try:
            self.tee.accept_view_key(grant)
        except TeeError:
            self.pending_grants.pop(self.view, None)

    def on_fetch(self, src: int, msg: m.Fetch) -> None:
        if not self.is_primary or msg.v != self.view or self.frozen:
            return
        for _, dst, sent in self.history:
            if dst == src and max(sent.counters()) > msg.after:
                self._send(src, sent)
        self._send_blobs_to(src)

    # -- client requests ----------------------------------------------------------

    def on_request(self, src: int, req: m.Request) -> None:
        if not self._client_ok(req):
            return
        if self.is_primary and not self.frozen:
            stored = self.replies.get(req.client)
            if stored is not None and stored.request.seq == req.seq:
                # Let a forwarding backup stop waiting as well.
                self._send(req.client, stored)
                if src != req.client:
                    self._send(src, stored)
                return
            self.enqueue(req)
            return
        if src != req.client:
            return
        last = self.app.cache.get(req.client)
        stored = self.replies.get(req.client)
        if stored is not None and stored.request.seq == req.seq:
            self._send(req.client, stored)
            return
        if last is not None and last[0] > req.seq:
            return
        if not self.frozen:
            self._send(self.primary, req)
        if req.rid not in self.waiting:
            self.waiting[req.rid] = req
            self.out.set_timer(("req", req.rid), self.cfg.request_timeout * self.delta)

    def on_request_timer(self, key) -> None:
        rid = key[1]
        if rid in self.waiting and not self.frozen:
            self.start_view_change(self.view + 1)

    def enqueue(self, req: m.Request) -> None:
        last = self.app.cache.get(req.client)
        if last is not None and last[0] > req.seq:
            return
        stored = self.replies.get(req.client)
        if stored is not None and stored.request.seq == req.seq:
            self._send(req.client, stored)
            return
        if self.inflight is not None and self.inflight.request.rid == req.rid:
            return
        if any(q.rid == req.rid for q in self.queue):
            return
        self.queue.append(req)
        self.try_next()

    def try_next(self) -> None:
        if not self.is_primary or self.frozen or self.inflight is not None or not self.queue:
            return
        if not self.in_service:
            return
        self.issue_prepare(self.queue.popleft())

    # -- primary: preprocessing and ordering ------------------------------------

    def _ensure_packages(self) -> None:
        need = self.tee.c_latest + 2
        if self.prepared_upto >= need:
            return
        if self.mode == m.MODE_FALLBACK:
            pkgs = self.tee.preprocessing_fallback(self.cfg.preprocess_batch)
        else:
            pkgs = self.tee.preprocessing(self.cfg.preprocess_batch)
        for pkg in pkgs:
            self.packages[pkg.counter.c] = pkg
            self.prepared_upto = pkg.counter.c
        targets = self.replicas if self.mode == m.MODE_FALLBACK else self.tree.nodes
        for r in targets:
            if r != self.id:
                blobs = tuple(p.blobs[r] for p in pkgs if r in p.blobs)
                if blobs and not self.behaviour.primary_silent:
                    self._send(r, m.Blobs(self.view, self.epoch, blobs, self.grants.get(r)))

    def _send_blobs_to(self, r: int) -> None:
        blobs = tuple(
            p.blobs[r] for c, p in sorted(self.packages.items()) if c > self.tee.c_latest and r in p.blobs
        )
        if blobs or r in self.grants:
            self._send(r, m.Blobs(self.view, self.epoch, blobs, self.grants.get(r)))

    def _emit(self, dst: int, msg) -> None:
        """Send a counter-bearing message and keep it for retransmission."""
        self.history.append((max(msg.counters()), dst, msg))
        if not self.behaviour.primary_silent:
            self._send(dst, msg)

    def issue_prepare(self, req: m.Request) -> None:
        self._ensure_packages()
        b = self.tee.request_counter(m.request_digest(req))
        self.since_reply.append(b)
        self._record(m.REC_PREPARE, b, req)
        self.requests_at[b.c] = req
        self.inflight = InFlight(req, b.c, b)
        self.out.notice("prepare", (req.rid, b.v, b.c))
        if self.mode == m.MODE_FALLBACK:
            for r in self.replicas:
                if r != self.id:
                    self._emit(r, m.FallbackPrepare(req, b))
            self._start_fallback_round(b.c, PHASE_COMMIT)
            return
        actives = [a for a in self.tree.nodes if a != self.id]
        for k, a in enumerate(actives):
            sent = req
            if self.behaviour.equivocate and k % 2 == 1:
                sent = m.Request(req.client, req.seq, req.op + " !", req.signature)
            self._emit(a, m.Prepare(sent, b))
        rel = self.tee.primary_share(b.c)
        self.start_aggregation(b.c, rel, PHASE_COMMIT)

    # -- aggregation along the tree ----------------------------------------------

    def start_aggregation(self, c: int, rel: ShareRelease, phase: str) -> None:
        kids = self.tree.children(self.id)
        agg = Aggregation(c, self.view, self.epoch, phase, rel.share, dict(rel.child_digests), set(kids), rel.commitment)
        if not kids:
            self._aggregation_done(agg)
            return
        self.aggs[c] = agg
        for j in kids:
            delay = self.cfg.child_timeout * self.delta * (self.tree.height(j) + 1)
            self.out.set_timer(("child", self.view, self.epoch, c, j), delay)
        for share in self.early_shares.pop((self.view, c), []):
            self.on_share(share.sender, share)

    def _aggregation_done(self, agg: Aggregation) -> None:
        self.aggs.pop(agg.c, None)
        if self.is_primary:
            if agg.phase == PHASE_COMMIT:
                self.primary_commit(agg.acc)
            else:
                self.primary_reply(agg.acc)
            return
        parent = self.tree.parent(self.id)
        if self.behaviour.silent_shares:
            return
        value = agg.acc
        if self.behaviour.wrong_shares:
            value = self.rng.randbytes(len(value))
        self._send(parent, m.Share(agg.c, agg.v, agg.epoch, self.id, value))

    def on_share(self, src: int, msg: m.Share) -> None:
        if src != msg.sender or self.frozen:
            return
        if (msg.v, msg.epoch) != (self.view, self.epoch):
            if msg.v > self.view or (msg.v == self.view and msg.epoch > self.epoch):
                self.early_shares.setdefault((msg.v, msg.c), []).append(msg)
            return
        agg = self.aggs.get(msg.c)
        if agg is None:
            if msg.c > self.tee.c_latest:
                self.early_shares.setdefault((msg.v, msg.c), []).append(msg)
            return
        j = msg.sender
        if j not in agg.pending:
            return
        self.out.cancel_timer(("child", agg.v, agg.epoch, agg.c, j))
        if self.provider.hash(msg.share) != agg.expect.get(j):
            agg.pending.discard(j)
            agg.expect.pop(j, None)
            self.raise_suspect(j)
            return
        agg.acc = bytes(a ^ b for a, b in zip(agg.acc, msg.share))
        agg.pending.discard(j)
        if not agg.pending and len(agg.expect) == len(self.tree.children(self.id)):
            self._aggregation_done(agg)

    def on_child_timeout(self, key) -> None:
        _, v, epoch, c, j = key
        agg = self.aggs.get(c)
        if agg is None or (agg.v, agg.epoch) != (v, epoch) or j not in agg.pending or self.frozen:
            return
        agg.pending.discard(j)
        agg.expect.pop(j, None)
        self.raise_suspect(j)

    # -- failure detection ---------------------------------------------------------

    def raise_suspect(self, accused: int) -> None:
        s = m.Suspect(accused, self.id, self.view, self.epoch)
        if self.is_primary:
            self._collect_suspect(s)
            return
        self._send(self.primary, s)
        parent = self.tree.parent(self.id)
        if parent is not None and parent != self.primary:
            self._send(parent, s)

    def on_suspect(self, src: int, s: m.Suspect) -> None:
        if src != s.accuser or (s.v, s.epoch) != (self.view, self.epoch) or self.frozen:
            return
        if self.mode != m.MODE_NORMAL or self.tree is None:
            return
        if self.is_primary:
            self._collect_suspect(s)
            return
        # A child reporting a suspicion is itself alive; stop waiting on it.
        if s.accuser in self.tree and self.tree.parent(s.accuser) == self.id:
            for c, agg in self.aggs.items():
                if s.accuser in agg.pending:
                    self.out.cancel_timer(("child", agg.v, agg.epoch, c, s.accuser))

    def _collect_suspect(self, s: m.Suspect) -> None:
        tree = self.tree
        if s.accused == self.id or s.accused not in tree or s.accuser not in tree:
            return
        if tree.parent(s.accused) != s.accuser:
            return
        if not self.suspects:
            self.out.set_timer(("settle", self.view, self.epoch), self.cfg.suspect_settle * self.delta)
        self.suspects.append(s)

    def on_settle(self, key) -> None:
        _, v, epoch = key
        suspects, self.suspects = self.suspects, []
        if (v, epoch) != (self.view, self.epoch) or not suspects or not self.is_primary or self.frozen:
            return
        # Handle only the accusation closest to the leaves.
        target = max(suspects, key=lambda s: (self.tree.depth(s.accused), -self.tree.position(s.accused)))
        self.suspect_count += 1
        self.out.notice("suspect", (target.accused, target.accuser))
        if self.suspect_count >= self.cfg.fallback_threshold:
            self.start_view_change(self.view + self.n, transition=True, mode=m.MODE_FALLBACK)
            return
        self.reshape_tree(target.accused, target.accuser)

    def reshape_tree(self, accused: int, accuser: int) -> None:
        self.accused.add(accused)
        outside = [r for r in self.replicas if r not in self.tree]
        fresh = [r for r in outside if r not in self.accused]
        pool = fresh or outside
        if not pool:
            self.start_view_change(self.view + self.n, transition=True, mode=m.MODE_FALLBACK)
            return
        replacement = pool[self.rng.randrange(len(pool))]
        old = self.tree
        try:
            new = new_tree_after_suspect(old, accused, replacement, accuser)
        except TopologyError:
            return
        b = self.tee.request_counter(m.tree_digest(old, new))
        self.tee.install_tree(new)
        self._record(m.REC_TREE, b, old=old, new=new)
        prior = tuple(self.since_reply)
        self._switch_tree(new, b.c)
        self.prepared_upto = b.c
        self.packages = {c: p for c, p in self.packages.items() if c <= b.c}
        for r in self.replicas:
            if r != self.id:
                self._emit(r, m.NewTree(old, new, b, prior))
        self.out.notice("new_tree", (accused, replacement, accuser, b.v, b.c))
        if self.inflight is not None:
            req = self.inflight.request
            self.inflight = None
            self.issue_prepare(req)
        else:
            self._ensure_packages()

    def _switch_tree(self, tree: TreeTopology, epoch: int) -> None:
        for c, agg in self.aggs.items():
            for j in agg.pending:
                self.out.cancel_timer(("child", agg.v, agg.epoch, c, j))
        self.aggs.clear()
        self.tree = tree
        self.epoch = epoch
        self.suspects = []

    def on_new_tree(self, msg: m.NewTree) -> None:
        b = msg.binding
        if not self._primary_binding_ok(b) or b.digest != m.tree_digest(msg.old, msg.new):
            self.start_view_change(self.view + 1)
            return
        if msg.new.root != self.primary or len(msg.new) != len(msg.old):
            self.start_view_change(self.view + 1)
            return
        try:
            for p in msg.prior:
                if p.c > self.tee.c_latest:
                    self.tee.advance_counter(p)
                    self._record(m.REC_OPAQUE, p)
            self.tee.advance_counter(b)
        except TeeError:
            self.start_view_change(self.view + 1)
            return
        self._record(m.REC_TREE, b, old=msg.old, new=msg.new)
        self._switch_tree(msg.new, b.c)
        self.drain()

    # -- active replica: prepare and commit -------------------------------------------

    def on_prepare(self, msg: m.Prepare) -> None:
        if self.mode != m.MODE_NORMAL or not self.is_active() or self.is_primary:
            return
        b, req = msg.binding, msg.request
        if not self._primary_binding_ok(b) or m.request_digest(req) != b.digest or not self._client_ok(req):
            self.start_view_change(self.view + 1)
            return
        blob = self.blobs[(b.v, self.epoch, b.c)]
        try:
            rel = self.tee.verify_counter(b, blob)
        except TeeError:
            self.start_view_change(self.view + 1)
            return
        self._record(m.REC_PREPARE, b, req)
        self.requests_at[b.c] = req
        self.releases[b.c] = rel
        self.start_aggregation(b.c, rel, PHASE_COMMIT)

    def on_commit(self, msg: m.Commit) -> None:
        if self.mode != m.MODE_NORMAL or not self.is_active() or self.is_primary:
            return
        b = msg.binding
        c = b.c - 1
        req, rel = self.requests_at.get(c), self.releases.get(c)
        if req is None or rel is None or not self._primary_binding_ok(b):
            self.start_view_change(self.view + 1)
            return
        if commitment_digest(self.provider, msg.secret, c, self.view) != rel.commitment:
            self.start_view_change(self.view + 1)
            return
        if b.digest != m.result_digest(req, msg.result):
            self.start_view_change(self.view + 1)
            return
        cached = self.app.executed(req.client, req.seq)
        if (cached if cached is not None else self.app.compute(req.op)) != msg.result:
            self.start_view_change(self.view + 1)
            return
        self._execute(req, c, self.view)
        blob = self.blobs[(b.v, self.epoch, b.c)]
        try:
            rel1 = self.tee.verify_counter(b, blob)
        except TeeError:
            self.start_view_change(self.view + 1)
            return
        self._record(m.REC_RESULT, b, req, msg.result)
        self.releases[b.c] = rel1
        self._done_waiting(req.rid)
        self.start_aggregation(b.c, rel1, PHASE_REPLY)
        self.round_finished()

    # -- primary: commit and reply ---------------------------------------------------

    def primary_commit(self, secret: bytes) -> None:
        fl = self.inflight
        if fl is None:
            return
        req = fl.request
        result = self._execute(req, fl.c, self.view)
        if self.behaviour.wrong_result:
            result = result + " "
        b1 = self.tee.request_counter(m.result_digest(req, result))
        self.since_reply.append(b1)
        self._record(m.REC_RESULT, b1, req, result)
        fl.phase, fl.secret, fl.result, fl.result_binding = PHASE_REPLY, secret, result, b1
        if self.mode == m.MODE_FALLBACK:
            for r in self.replicas:
                if r != self.id:
                    self._emit(r, m.FallbackCommit(secret, result, b1))
            self._start_fallback_round(b1.c, PHASE_REPLY)
            return
        for a in self.tree.nodes:
            if a != self.id:
                self._emit(a, m.Commit(secret, result, b1))
        rel = self.tee.primary_share(b1.c)
        self.start_aggregation(b1.c, rel, PHASE_REPLY)

    def primary_reply(self, secret: bytes) -> None:
        fl = self.inflight
        if fl is None or fl.result_binding is None:
            return
        c = fl.c
        reply = m.Reply(
            fl.request,
            fl.secret,
            self.packages[c].binding,
            fl.prepare,
            fl.result,
            secret,
            self.packages[c + 1].binding,
            fl.result_binding,
        )
        if self.mode == m.MODE_FALLBACK:
            targets = [r for r in self.replicas if r != self.id]
        else:
            targets = [r for r in self.replicas if r not in self.tree]
        if not self.behaviour.primary_silent:
            self._send(fl.request.client, reply)
        for r in targets:
            self._emit(r, reply)
        self.replies[fl.request.client] = reply
        self._done_waiting(fl.request.rid)
        self.out.notice("reply", (fl.request.rid, self.view, c))
        self.inflight = None
        self.since_reply = []
        self.packages = {k: p for k, p in self.packages.items() if k > c + 1}
        self.round_finished()
        if self.mode == m.MODE_FALLBACK:
            self.fallback_done += 1
            if self.fallback_done >= self.cfg.fallback_duration:
                self.start_probe()
                return
        self.try_next()

    # -- passive replica ------------------------------------------------------------

    def _reply_ok(self, r: m.Reply) -> bool:
        p, c0, c1, rb = r.prepare, r.commitment, r.next_commitment, r.result_binding
        bindings = (p, c0, c1, rb)
        if any(b.issuer != self.primary or b.v != self.view for b in bindings):
            return False
        if not (p.c == c0.c and c1.c == rb.c == p.c + 1):
            return False
        if p.kind != ASSIGN or rb.kind != ASSIGN or c0.kind == ASSIGN or c1.kind == ASSIGN:
            return False
        if p.digest != m.request_digest(r.request) or rb.digest != m.result_digest(r.request, r.result):
            return False
        return all(verify_assignment(self.provider, self.registry, b) for b in bindings)

    def on_reply(self, r: m.Reply) -> None:
        if not self._reply_ok(r):
            self.start_view_change(self.view + 1)
            return
        try:
            if r.prepare.c > self.tee.c_latest:
                self.tee.update_counter(r.secret, r.commitment)
                self._record(m.REC_PREPARE, r.prepare, r.request)
            self.tee.update_counter(r.next_secret, r.next_commitment)
        except TeeError:
            self.start_view_change(self.view + 1)
            return
        self._record(m.REC_RESULT, r.result_binding, r.request, r.result)
        req = r.request
        if self.app.apply_delta(req.client, req.seq, r.result):
            self.executed.append(req.rid)
            self.out.notice("exec", (req.rid, self.view, r.prepare.c, r.result))
        self._note_reply(self.primary, r)
        self.round_finished()

    def _note_reply(self, src: int, r: m.Reply) -> None:
        if src != self.primary or not self._reply_ok(r):
            return
        prev = self.replies.get(r.request.client)
        if prev is None or prev.request.seq <= r.request.seq:
            self.replies[r.request.client] = r
        self._done_waiting(r.request.rid)

    # -- fallback mode ------------------------------------------------------------

    def _start_fallback_round(self, c: int, phase: str) -> None:
        rel = self.tee.primary_share(c)
        rnd = FallbackRound(c, phase, rel.commitment)
        rnd.shares[self.id] = rel.share
        self.fb_rounds[c] = rnd
        self._try_reconstruct(rnd)

    def on_fallback_share(self, src: int, msg: m.FallbackShare) -> None:
        if src != msg.sender or msg.v != self.view or not self.is_primary or self.frozen:
            return
        rnd = self.fb_rounds.get(msg.c)
        if rnd is None or rnd.done or src in rnd.shares:
            return
        if msg.x != fallback_point(src):
            return
        rnd.shares[src] = ShamirShare(msg.x, int.from_bytes(msg.y, "big"))
        self._try_reconstruct(rnd, newest=src)

    def _try_reconstruct(self, rnd: FallbackRound, newest: int | None = None) -> None:
        k = self.f + 1
        if len(rnd.shares) < k:
            return
        holders = sorted(rnd.shares)
        if newest is not None:
            others = [h for h in holders if h != newest]
            combos = ((newest, *rest) for rest in itertools.combinations(others, k - 1))
        else:
            combos = itertools.combinations(holders, k)
        for combo in combos:
            try:
                value = shamir_reconstruct([rnd.shares[h] for h in combo], self.f, self.tee.prime)
            except ValueError:
                continue
            if value >= 1 << 128:
                continue
            secret = int_to_secret(value)
            if commitment_digest(self.provider, secret, rnd.c, self.view) == rnd.commitment:
                rnd.done = True
                self.fb_rounds.pop(rnd.c, None)
                self.out.notice("fallback_secret", (self.view, rnd.c, secret, tuple(combo)))
                if rnd.phase == PHASE_COMMIT:
                    self.primary_commit(secret)
                else:
                    self.primary_reply(secret)
                return

    def _fallback_share_out(self, c: int, share: ShamirShare) -> None:
        if self.behaviour.silent_shares:
            return
        y = share.y
        if self.behaviour.wrong_shares:
            y = self.rng.randrange(self.tee.prime)
        self._send(self.primary, m.FallbackShare(c, self.view, self.id, share.x, y.to_bytes(17, "big")))

    def on_fallback_prepare(self, msg: m.FallbackPrepare) -> None:
        if self.mode != m.MODE_FALLBACK or self.is_primary:
            return
        b, req = msg.binding, msg.request
        if not self._primary_binding_ok(b) or m.request_digest(req) != b.digest or not self._client_ok(req):
            self.start_view_change(self.view + 1)
            return
        try:
            rel = self.tee.verify_counter(b, self.blobs[(b.v, self.epoch, b.c)])
        except TeeError:
            self.start_view_change(self.view + 1)
            return
        self._record(m.REC_PREPARE, b, req)
        self.requests_at[b.c] = req
        self.releases[b.c] = rel
        self._fallback_share_out(b.c, rel.share)

    def on_fallback_commit(self, msg: m.FallbackCommit) -> None:
        if self.mode != m.MODE_FALLBACK or self.is_primary:
            return
        b = msg.binding
        c = b.c - 1
        req, rel = self.requests_at.get(c), self.releases.get(c)
        if req is None or rel is None or not self._primary_binding_ok(b):
            self.start_view_change(self.view + 1)
            return
        ok = commitment_digest(self.provider, msg.secret, c, self.view) == rel.commitment
        ok = ok and b.digest == m.result_digest(req, msg.result)
        cached = self.app.executed(req.client, req.seq)
        ok = ok and (cached if cached is not None else self.app.compute(req.op)) == msg.result
        if not ok:
            self.start_view_change(self.view + 1)
            return
        self._execute(req, c, self.view)
        try:
            rel1 = self.tee.verify_counter(b, self.blobs[(b.v, self.epoch, b.c)])
        except TeeError:
            self.start_view_change(self.view + 1)
            return
        self._record(m.REC_RESULT, b, req, msg.result)
        self.releases[b.c] = rel1
        self._fallback_share_out(b.c, rel1.share)
        self.round_finished()

    def start_probe(self) -> None:
        self.probe_nonce += 1
        self.probe_acks = {self.id}
        for r in self.replicas:
            if r != self.id:
                self._send(r, m.Probe(self.view, self.probe_nonce))
        self.out.set_timer(("probe", self.view, self.probe_nonce), self.cfg.probe_window * self.delta)

    def on_probe(self, src: int, msg: m.Probe) -> None:
        if src == msg.v % self.n and msg.v == self.view and not self.frozen:
            self._send(src, m.ProbeAck(self.id, msg.v, msg.nonce))

    def on_probe_ack(self, src: int, msg: m.ProbeAck) -> None:
        if src == msg.sender and msg.v == self.view and msg.nonce == self.probe_nonce:
            self.probe_acks.add(src)

    def on_probe_timer(self, key) -> None:
        _, v, nonce = key
        if v != self.view or nonce != self.probe_nonce or not self.is_primary or self.frozen:
            return
        if len(self.probe_acks) >= self.f + 1:
            self.start_view_change(self.view + self.n, transition=True, mode=m.MODE_NORMAL)
        else:
            self.fallback_done = 0
            self.try_next()

    # -- tree for a new view ---------------------------------------------------------

    def choose_tree(self, alive: list[int]) -> TreeTopology:
        """Primary plus f others, preferring replicas known to be responsive."""
        ranked = [r for r in alive if r != self.id and r not in self.accused]
        ranked += [r for r in alive if r != self.id and r in self.accused]
        ranked += [r for r in self.replicas if r != self.id and r not in ranked]
        return build_tree(self.id, [self.id, *ranked[: self.f]], self.cfg.branching)
