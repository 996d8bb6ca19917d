"""View change, rejoin after a reboot, and checkpointing.

Mixed into :class:`fastbft.replica.Replica`; relies on its state and helpers.

A replica asking for a view change freezes its TEE for the current view, so
once f+1 replicas have asked, no further request can commit there.  The new
primary collects f+1 frozen logs, rebuilds the history of the last view they
share, and proposes it.  It moves its own TEE into the new view only after f
other replicas confirm, so an abandoned attempt leaves it where everybody
else still is.
"""

from __future__ import annotations

import json
from typing import Optional

from . import messages as m
from .app import KVStore
from .tee import ASSIGN, CounterAttestation, TeeError, verify_assignment, verify_attestation
from .topology import TreeTopology


class History:
    """History of the last shared view, rebuilt from a set of frozen logs."""

    def __init__(self, vm: int, primary: int, base: int, c_max: int, records: tuple) -> None:
        self.vm = vm
        self.primary = primary
        self.base = base
        self.c_max = c_max
        self.records = records

    def installable(self, c_latest: int, v: int) -> bool:
        return v == self.vm and self.base <= c_latest <= self.c_max


class RecoveryMixin:
    def _init_recovery(self) -> None:
        self.frozen = False
        self.vc_target = 0
        self.vc_attempts = 0
        self.vc_timers: set[int] = set()
        self.rvcs: dict[int, dict[int, m.ReqViewChange]] = {}
        self.latest_target: dict[int, int] = {}
        self.lead_armed: set[int] = set()
        self.nv_sent: dict[int, tuple] = {}
        self.nv_pending: dict[int, tuple] = {}
        self.vc_msgs: dict[int, dict[int, m.ViewChange]] = {}
        self.rejoining = False
        self.rejoin_nonce = 0
        self.rejoin_replies: dict[int, m.RejoinReply] = {}
        self.deferred: list[tuple[int, object]] = []

    def primary_of(self, view: int) -> int:
        return view % self.n

    # -- requesting a view change -------------------------------------------------

    def start_view_change(self, target: int, transition: bool = False, mode: int = m.MODE_NORMAL) -> None:
        if not self.in_service or target <= self.view or target <= self.vc_target:
            return
        if self.tee.v != self.view:
            self.begin_rejoin()
            return
        self.vc_target = target
        self.frozen = True
        self._drop_aggregations()
        rvc_body = m.log_bytes(target, transition, mode, self.checkpoint, self.log)
        att = self.tee.attest(self.provider.hash(rvc_body), freeze=True)
        rvc = m.ReqViewChange(self.id, target, transition, mode, self.checkpoint, tuple(self.log), att)
        self.rvcs.setdefault(target, {})[self.id] = rvc
        self.latest_target[self.id] = target
        for r in self.replicas:
            self._send(r, rvc)
        self.out.notice("req_view_change", (target, transition))
        delay = self.cfg.view_change_timeout * self.delta * (2 ** min(self.vc_attempts, 6))
        self.vc_attempts += 1
        self.vc_timers.add(target)
        self.out.set_timer(("vc", target), delay)
        self._maybe_lead(target)

    def _drop_aggregations(self) -> None:
        for c, agg in self.aggs.items():
            for j in agg.pending:
                self.out.cancel_timer(("child", agg.v, agg.epoch, c, j))
        self.aggs.clear()
        self.suspects = []

    def _log_ok(self, rvc: m.ReqViewChange) -> bool:
        att = rvc.attestation
        if att.issuer != rvc.sender or not att.freeze:
            return False
        if not verify_attestation(self.provider, self.registry, att):
            return False
        if att.digest != self.provider.hash(rvc.log_bytes()):
            return False
        ck = rvc.checkpoint
        if ck.v != att.v or ck.c > att.c:
            return False
        counters = [r.binding.c for r in rvc.log]
        if counters != list(range(ck.c + 1, att.c + 1)):
            return False
        for rec in rvc.log:
            b = rec.binding
            if b.kind != ASSIGN or b.v != att.v:
                return False
            if rec.kind != m.REC_OPAQUE and b.issuer != att.primary:
                return False
            if rec.kind != m.REC_OPAQUE and rec.content_digest() != b.digest:
                return False
            if not verify_assignment(self.provider, self.registry, b):
                return False
        return True

    def on_req_view_change(self, src: int, rvc: m.ReqViewChange) -> None:
        if src != rvc.sender or rvc.target <= self.view or not self._log_ok(rvc):
            return
        self.rvcs.setdefault(rvc.target, {})[src] = rvc
        self.latest_target[src] = max(self.latest_target.get(src, 0), rvc.target)
        if rvc.transition and src == self.primary and rvc.target == self.view + self.n:
            self.start_view_change(rvc.target, transition=True, mode=rvc.mode)
        self._check_join()
        self._maybe_lead(rvc.target)

    def _check_join(self) -> None:
        targets = sorted((t for t in self.latest_target.values() if t > self.view), reverse=True)
        if len(targets) >= self.f + 1:
            t = targets[self.f]
            if t > self.vc_target:
                self.start_view_change(t)

    # -- new primary ----------------------------------------------------------------

    def _maybe_lead(self, t: int) -> None:
        if self.primary_of(t) != self.id or t in self.nv_sent or self.vc_target != t:
            return
        if len(self.rvcs.get(t, {})) < self.f + 1 or t in self.lead_armed:
            return
        # Give stragglers a moment so the history covers every live replica.
        self.lead_armed.add(t)
        self.out.set_timer(("lead", t), 2 * self.delta)

    def on_lead_timer(self, key) -> None:
        t = key[1]
        if t in self.nv_sent or self.vc_target != t or t <= self.view or not self.in_service:
            return
        proofs = tuple(self.rvcs[t][r] for r in sorted(self.rvcs[t]))
        hist = self.compute_history(proofs, t)
        if hist is None or not hist.installable(self.tee.c_latest, self.tee.v):
            return
        own = self.rvcs[t][self.id]
        mode = own.mode if own.transition else m.MODE_NORMAL
        tree = None if mode == m.MODE_FALLBACK else self.choose_tree(sorted(self.rvcs[t]))
        try:
            for rec in hist.records:
                if rec.binding.c > self.tee.c_latest:
                    self.tee.advance_counter(rec.binding)
                    self.log.append(rec)
            digest = m.view_digest(t, mode, tree, hist.records, hist.base)
            b = self.tee.request_counter(digest)
        except TeeError:
            self.begin_rejoin()
            return
        self._record(m.REC_OPAQUE, b)
        nv = m.NewView(t, mode, tree, hist.records, hist.base, b, proofs)
        self.nv_sent[t] = (nv, hist)
        self.nv_pending[t] = (nv, hist)
        for r in self.replicas:
            self._send(r, nv)
        self._try_install(t)

    def compute_history(self, proofs, t: int) -> Optional[History]:
        senders = {p.sender for p in proofs}
        if len(senders) != len(proofs) or len(proofs) < self.f + 1:
            return None
        for p in proofs:
            if p.target != t or not self._log_ok(p):
                return None
        vm = max(p.attestation.v for p in proofs)
        logs = [p for p in proofs if p.attestation.v == vm]
        primary = logs[0].attestation.primary
        if any(p.attestation.primary != primary for p in logs):
            return None
        union: dict[int, m.LogRecord] = {}
        for p in logs:
            for rec in p.log:
                cur = union.get(rec.binding.c)
                if cur is None or (cur.kind == m.REC_OPAQUE and rec.kind != m.REC_OPAQUE):
                    union[rec.binding.c] = rec
        c_max = max(p.attestation.c for p in logs)
        base = c_max
        while base >= 1 and base in union:
            base -= 1
        records = tuple(union[c] for c in range(base + 1, c_max + 1))
        return History(vm, primary, base, c_max, records)

    # -- other replicas -----------------------------------------------------------------

    def on_new_view(self, src: int, nv: m.NewView) -> None:
        t = nv.target
        if t <= self.view or src != self.primary_of(t) or t in self.nv_pending:
            return
        hist = self.compute_history(nv.proofs, t)
        if hist is None or hist.records != nv.history or hist.base != nv.base:
            return
        b = nv.binding
        digest = m.view_digest(t, nv.mode, nv.tree, nv.history, nv.base)
        if b.kind != ASSIGN or b.issuer != src or b.v != hist.vm or b.c != hist.c_max + 1 or b.digest != digest:
            return
        if not verify_assignment(self.provider, self.registry, b):
            return
        if nv.mode == m.MODE_NORMAL:
            tr = nv.tree
            if tr is None or tr.root != src or len(tr) != self.f + 1 or any(x not in self.replicas for x in tr.nodes):
                return
        elif nv.tree is not None:
            return
        self.nv_pending[t] = (nv, hist)
        if not hist.installable(self.tee.c_latest, self.tee.v):
            self.begin_rejoin()
            return
        self.vc_target = max(self.vc_target, t)
        self.frozen = True
        self._drop_aggregations()
        att = self.tee.attest(b.digest, freeze=True)
        vc = m.ViewChange(self.id, t, b.digest, att)
        self.vc_msgs.setdefault(t, {})[self.id] = vc
        for r in self.replicas:
            self._send(r, vc)
        self._try_install(t)

    def on_view_change(self, src: int, vc: m.ViewChange) -> None:
        att = vc.attestation
        if src != vc.sender or vc.target <= self.view or att.issuer != src or not att.freeze:
            return
        if att.digest != vc.digest or not verify_attestation(self.provider, self.registry, att):
            return
        self.vc_msgs.setdefault(vc.target, {})[src] = vc
        self._try_install(vc.target)

    def _try_install(self, t: int) -> None:
        if t not in self.nv_pending or t <= self.view or not self.in_service:
            return
        nv, hist = self.nv_pending[t]
        if self.id != self.primary_of(t) and self.id not in self.vc_msgs.get(t, {}):
            return
        ok = [
            vc
            for vc in self.vc_msgs.get(t, {}).values()
            if vc.digest == nv.binding.digest
            and vc.sender != self.primary_of(t)
            and hist.installable(vc.attestation.c, vc.attestation.v)
        ]
        if len(ok) < self.f:
            return
        try:
            if self.id == self.primary_of(t):
                grants = self.tee.be_primary(list(self.replicas), nv.tree, view=t)
            else:
                for rec in hist.records:
                    if rec.binding.c > self.tee.c_latest:
                        self.tee.advance_counter(rec.binding)
                self.tee.update_view(nv.binding, None, view=t)
                grants = {}
        except TeeError:
            self.begin_rejoin()
            return
        self._install_view(nv, hist, grants)

    def _install_view(self, nv: m.NewView, hist: History, grants: dict[int, bytes]) -> None:
        t = nv.target
        old_view = self.view
        for rec in hist.records:
            if rec.kind == m.REC_PREPARE and rec.request is not None:
                self._execute(rec.request, rec.binding.c, hist.vm)
        own = self.rvcs.get(t, {}).get(self.primary_of(t))
        transition = own is not None and own.transition
        self.view = t
        self.mode = nv.mode
        self.tree = nv.tree
        self.epoch = 0
        self.grants = grants
        self.log = []
        self.checkpoint = m.Checkpoint(0, t, self.app.digest())
        self.since_checkpoint = 0
        self._reset_view_state()
        self._take_grant()
        if self.id == self.primary_of(t):
            self.out.notice("new_view", (t, nv.mode, transition, old_view))
        self.out.notice("view_installed", (t, nv.mode, transition))
        waiting = list(self.waiting.values())
        for req in waiting:
            self._done_waiting(req.rid)
        if self.is_primary:
            self._ensure_packages()
            for req in waiting:
                self.enqueue(req)
        else:
            for req in waiting:
                self.on_request(req.client, req)
        self.drain()

    def _reset_view_state(self) -> None:
        t = self.view
        self.frozen = False
        for x in list(self.vc_timers):
            self.out.cancel_timer(("vc", x))
        self.vc_timers.clear()
        self.vc_target = max(self.vc_target, t)
        self.vc_attempts = 0
        self.rvcs = {k: v for k, v in self.rvcs.items() if k > t}
        self.latest_target = {r: x for r, x in self.latest_target.items() if x > t}
        self.vc_msgs = {k: v for k, v in self.vc_msgs.items() if k > t}
        self.nv_pending = {k: v for k, v in self.nv_pending.items() if k > t}
        self.pending_grants = {k: v for k, v in self.pending_grants.items() if k >= t}
        self._drop_aggregations()
        self.early_shares = {k: v for k, v in self.early_shares.items() if k[0] >= t}
        self.blobs = {k: v for k, v in self.blobs.items() if k[0] >= t}
        self.releases.clear()
        self.requests_at.clear()
        self.suspect_count = 0
        self.fallback_done = 0
        self.fb_rounds.clear()
        self.history = []
        self.packages = {}
        self.prepared_upto = 0
        self.since_reply = []
        self.probe_acks = set()
        if self.inflight is not None:
            req = self.inflight.request
            self.inflight = None
            if self.app.executed(req.client, req.seq) is None:
                self.queue.appendleft(req)
        if not self.is_primary:
            self.queue.clear()

    def on_vc_timer(self, key) -> None:
        t = key[1]
        self.vc_timers.discard(t)
        if self.view >= t or self.vc_target != t:
            return
        support = sum(1 for x in self.latest_target.values() if x >= t)
        if support >= self.f + 1:
            self.start_view_change(t + 1)
        elif any(self._view_of(msg) >= self.view for _, msg in self.buffer):
            # The old view carries on without us and our TEE is frozen there.
            self.begin_rejoin()
        else:
            own = self.rvcs.get(t, {}).get(self.id)
            if own is not None:
                for r in self.replicas:
                    self._send(r, own)
            self.vc_timers.add(t)
            self.out.set_timer(("vc", t), self.cfg.view_change_timeout * self.delta)

    # -- rejoin after reboot or falling behind ----------------------------------------------

    def begin_rejoin(self) -> None:
        if self.behaviour.crashed:
            return
        if self.tee.status != "locked":
            self.tee.restore(None)
        self.rejoining = True
        self.frozen = False
        self._drop_aggregations()
        for x in list(self.vc_timers):
            self.out.cancel_timer(("vc", x))
        self.vc_timers.clear()
        self.inflight = None
        self.queue.clear()
        self.rejoin_nonce += 1
        self.rejoin_replies = {}
        self.out.notice("rejoin_started", self.rejoin_nonce)
        for r in self.replicas:
            self._send(r, m.Rejoin(self.id, self.rejoin_nonce))
        self.out.set_timer(("rejoin", self.rejoin_nonce), self.cfg.rejoin_retry * self.delta)

    def snapshot_bytes(self) -> bytes:
        snap = {
            "view": self.view,
            "mode": self.mode,
            "tree": None if self.tree is None else self.tree.encode().hex(),
            "epoch": self.epoch,
            "app": self.app.snapshot(),
            "executed": self.executed,
        }
        return json.dumps(snap, sort_keys=True, separators=(",", ":")).encode()

    def on_rejoin(self, src: int, msg: m.Rejoin) -> None:
        if src != msg.sender or src == self.id or not self.in_service:
            return
        if self.tee.v != self.view or src == self.primary_of(self.tee.v):
            # A rebooted primary must not come back as primary of the same view.
            return
        snap = self.snapshot_bytes()
        att = self.tee.attest(self.provider.hash(snap))
        self._send(src, m.RejoinReply(self.id, msg.nonce, snap, att))

    def on_rejoin_reply(self, src: int, msg: m.RejoinReply) -> None:
        if not self.rejoining or src != msg.sender or msg.nonce != self.rejoin_nonce:
            return
        att: CounterAttestation = msg.attestation
        if att.issuer != src:
            return
        self.rejoin_replies[src] = msg
        groups: dict[tuple, list[m.RejoinReply]] = {}
        for r in self.rejoin_replies.values():
            a = r.attestation
            groups.setdefault((a.digest, a.c, a.v, a.primary), []).append(r)
        for key, group in sorted(groups.items(), key=lambda kv: -len(kv[1])):
            if len(group) < self.f + 1:
                continue
            evidence = [(r.snapshot, r.attestation) for r in group]
            if not self.tee.reset_counter(evidence):
                continue
            self._adopt(json.loads(group[0].snapshot), self.tee.c_latest, self.tee.v)
            return

    def _adopt(self, snap: dict, c: int, v: int) -> None:
        self.rejoining = False
        self.out.cancel_timer(("rejoin", self.rejoin_nonce))
        self.view = v
        self.mode = snap["mode"]
        self.tree = None if snap["tree"] is None else TreeTopology.decode(bytes.fromhex(snap["tree"]))
        self.epoch = snap["epoch"]
        self.app = KVStore.from_snapshot(snap["app"])
        self.executed = list(snap["executed"])
        self.log = []
        self.checkpoint = m.Checkpoint(c, v, self.app.digest())
        self.since_checkpoint = 0
        self.grants = {}
        self.buffer = [(s, x) for s, x in self.buffer if self._view_of(x) >= v]
        self._reset_view_state()
        self.vc_target = v
        self.out.notice("rejoined", (v, c, tuple(self.executed)))
        for src, msg in self.deferred:
            self._dispatch(src, msg)
        self.deferred = []
        self._check_join()
        if self.tee.v == self.view and self.is_active() and not self.tee.has_view_key:
            self._send(self.primary, m.Fetch(self.id, self.view, self.tee.c_latest))
        self.drain()

    def on_rejoin_timer(self, key) -> None:
        if not self.rejoining or key[1] != self.rejoin_nonce or self.behaviour.crashed:
            return
        self.rejoin_nonce += 1
        self.rejoin_replies = {}
        for r in self.replicas:
            self._send(r, m.Rejoin(self.id, self.rejoin_nonce))
        self.out.set_timer(("rejoin", self.rejoin_nonce), self.cfg.rejoin_retry * self.delta)

    # -- checkpoints -------------------------------------------------------------------------

    def round_finished(self) -> None:
        self.since_checkpoint += 1
        if self.since_checkpoint >= self.cfg.checkpoint_interval:
            self.since_checkpoint = 0
            self.checkpoint = m.Checkpoint(self.tee.c_latest, self.view, self.app.digest())
            self.log = []
            self.out.notice("checkpoint", (self.view, self.tee.c_latest))
