"""Deterministic discrete-event network hosting replicas and clients.

A run is a pure function of its :class:`Scenario` (seed included).  Events are
ordered by ``(time, sequence number)``; every random draw comes from a named
sub-generator seeded from the scenario seed.  Invariant monitors run after
every event and abort the run at the first violation.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Optional

from . import messages as m
from .client import Client
from .config import ProtocolConfig
from .effects import CancelTimer, Notice, Send, SetTimer
from .primitives import KEY_SIZE, make_provider
from .replica import Replica
from .tee import TEE, KeyRegistry
from .topology import build_tree

FAULT_KINDS = (
    "crash",
    "silent-shares",
    "wrong-shares",
    "primary-equivocate-attempt",
    "primary-silent",
    "primary-wrong-result",
    "unscheduled-reboot",
    "delay-amplify",
)
# Scripts that make the untrusted side deviate from the protocol.
BYZANTINE_KINDS = frozenset(
    {"silent-shares", "wrong-shares", "primary-equivocate-attempt", "primary-silent", "primary-wrong-result"}
)
# Phases counted per committed request.
PHASES = ("PREPARE", "COMMIT_SHARE", "COMMIT", "REPLY_SHARE", "REPLY")


class ScenarioError(ValueError):
    """The scenario violates a structural constraint."""


class SafetyViolation(RuntimeError):
    def __init__(self, invariant: str, event_index: int, detail: str) -> None:
        super().__init__(f"{invariant} violated at event {event_index}: {detail}")
        self.invariant = invariant
        self.event_index = event_index
        self.detail = detail


@dataclass(frozen=True)
class DelayModel:
    """One-hop delay Δ·(1+jitter·u) after ``gst``; before it up to ``chaos`` extra Δ."""

    delta: float = 1.0
    jitter: float = 0.5
    gst: float = 0.0
    chaos: float = 20.0


@dataclass(frozen=True)
class FaultSpec:
    target: int
    kind: str
    start: float = 0.0
    end: Optional[float] = None
    factor: float = 4.0

    def active(self, t: float) -> bool:
        return t >= self.start and (self.end is None or t < self.end)


@dataclass(frozen=True)
class Scenario:
    n: int
    f: Optional[int] = None
    branching: int = 2
    delay: DelayModel = field(default_factory=DelayModel)
    faults: tuple[FaultSpec, ...] = ()
    clients: int = 1
    requests: int = 10
    seed: int = 0
    horizon: float = 5000.0
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    @property
    def fault_bound(self) -> int:
        return (self.n - 1) // 2 if self.f is None else self.f

    def validate(self) -> None:
        f = self.fault_bound
        if self.n != 2 * f + 1 or f < 1:
            raise ScenarioError(f"n must equal 2f+1 with f >= 1 (got n={self.n}, f={f})")
        if self.branching != self.protocol.branching:
            raise ScenarioError("branching must match protocol.branching")
        if self.clients < 1 or self.requests < 0:
            raise ScenarioError("need at least one client and a non-negative request count")
        if self.horizon <= 0:
            raise ScenarioError("horizon must be positive")
        for spec in self.faults:
            if spec.kind.startswith("tee") or spec.kind not in FAULT_KINDS:
                raise ScenarioError(
                    f"fault kind {spec.kind!r} is not expressible: faults act on the untrusted side only"
                )
            if not 0 <= spec.target < self.n:
                raise ScenarioError(f"fault target {spec.target} is not a replica")
            if spec.start > self.horizon or (spec.end is not None and spec.end < spec.start):
                raise ScenarioError(f"fault window for replica {spec.target} lies outside the horizon")
        targets = {spec.target for spec in self.faults}
        if len(targets) > f:
            raise ScenarioError(f"{len(targets)} faulty replicas exceed the bound f={f}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    counts: dict[str, int]
    messages_per_request: float
    latencies: dict[str, float]
    view_changes: int
    new_trees: int
    fallback_entries: int
    fallback_exits: int
    completed: int
    expected: int
    safety: bool
    liveness: bool
    violation: Optional[str]
    fallback_reconstructions: int
    fallback_mismatches: int
    end_time: float
    events: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class RunResult:
    scenario: Scenario
    report: MetricsReport
    trace: list[str]
    sim: "Simulation"

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


def count_messages(trace: list[str], rid: str) -> dict[str, int]:
    """Per-phase protocol message counts for one request, read off a trace."""
    counts = {p: 0 for p in PHASES}
    for line in trace:
        rec = json.loads(line)
        if rec.get("req") == rid and rec.get("phase") in counts:
            counts[rec["phase"]] += 1
    counts["total"] = sum(counts[p] for p in PHASES)
    return counts


def _sub_rng(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}/{name}")


class Simulation:
    def __init__(self, scenario: Scenario) -> None:
        scenario.validate()
        self.scn = scenario
        self.n = scenario.n
        self.f = scenario.fault_bound
        delta = scenario.delay.delta
        base = build_tree(0, list(range(self.f + 1)), scenario.branching)
        # Stretch end-to-end timers with tree height so deep trees are not mistaken for faults.
        stretch = max(1.0, (base.height(0) + 1) / 2)
        p = scenario.protocol
        self.cfg = replace(
            p,
            client_timeout=p.client_timeout * stretch,
            request_timeout=p.request_timeout * stretch,
            view_change_timeout=p.view_change_timeout * stretch,
        )
        self.provider = make_provider(self.cfg.crypto)
        self.net_rng = _sub_rng(scenario.seed, "net")
        self.ops_rng = _sub_rng(scenario.seed, "ops")

        self.tees = [
            TEE(i, self.provider, _sub_rng(scenario.seed, f"tee{i}")) for i in range(self.n)
        ]
        registry = KeyRegistry(
            {i: t.verify_key for i, t in enumerate(self.tees)}, {i: t.enc_key for i, t in enumerate(self.tees)}
        )
        for t in self.tees:
            t.install_registry(registry)
        self.registry = registry
        key_rng = _sub_rng(scenario.seed, "genesis")
        view_keys = {i: key_rng.randbytes(KEY_SIZE) for i in range(self.n)}
        for t in self.tees:
            t.genesis(range(self.n), base, view_keys)

        self.clients = [
            Client(
                self.n + k,
                self.n,
                self.provider,
                registry,
                _sub_rng(scenario.seed, f"client{k}"),
                timeout=self.cfg.client_timeout * delta,
            )
            for k in range(scenario.clients)
        ]
        client_keys = {c.cid: c.verify_key for c in self.clients}
        self.replicas = [
            Replica(i, self.n, self.cfg, self.tees[i], client_keys, _sub_rng(scenario.seed, f"replica{i}"), delta)
            for i in range(self.n)
        ]

        self.byzantine = {s.target for s in scenario.faults if s.kind in BYZANTINE_KINDS}
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.timer_gen: dict[tuple, int] = {}
        self.trace: list[str] = []
        self.events = 0
        self.counts: dict[str, int] = {}
        self.slot_rid: dict[tuple[int, int], str] = {}

        # monitors
        self.executed: dict[int, list[str]] = {i: [] for i in range(self.n)}
        self.longest: list[str] = []
        self.slot_exec: dict[tuple[int, int], str] = {}
        self.exec_results: dict[str, str] = {}
        self.issued_seen = [0] * self.n
        self.issued_last: list[tuple[int, int]] = [(-1, -1)] * self.n
        self.violation: Optional[SafetyViolation] = None
        self.fallback_reconstructions = 0
        self.fallback_mismatches = 0

        # metrics
        self.submitted_at: dict[str, float] = {}
        self.latencies: dict[str, float] = {}
        self.accepted: dict[str, str] = {}
        self.new_views: dict[int, tuple] = {}
        self.new_trees = 0
        self.remaining = {c.cid: scenario.requests for c in self.clients}

        for i, r in enumerate(self.replicas):
            r.start(base)
            self._apply(i, r.out.drain())
        for spec in scenario.faults:
            self._push(spec.start, "fault", spec)
        for c in self.clients:
            self._push(0.0, "submit", c.cid)

    # -- event plumbing ----------------------------------------------------------------

    def _push(self, t: float, kind: str, payload: Any) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, payload))

    def _delay(self, src: int) -> float:
        d = self.scn.delay
        u = self.net_rng.random()
        if self.now < d.gst:
            hop = d.delta * (1.0 + d.chaos * u)
        else:
            hop = d.delta * (1.0 + d.jitter * u)
        if src < self.n:
            for spec in self.scn.faults:
                if spec.target == src and spec.kind == "delay-amplify" and spec.active(self.now):
                    hop *= spec.factor
        return hop

    def _annotate(self, msg) -> tuple[Optional[str], Optional[str]]:
        if isinstance(msg, (m.Prepare, m.FallbackPrepare)):
            b = msg.binding
            self.slot_rid.setdefault((b.v, b.c), msg.request.rid)
            return msg.request.rid, "PREPARE"
        if isinstance(msg, (m.Share, m.FallbackShare)):
            rid = self.slot_rid.get((msg.v, msg.c))
            if rid is not None:
                return rid, "COMMIT_SHARE"
            return self.slot_rid.get((msg.v, msg.c - 1)), "REPLY_SHARE"
        if isinstance(msg, (m.Commit, m.FallbackCommit)):
            return self.slot_rid.get((msg.binding.v, msg.binding.c - 1)), "COMMIT"
        if isinstance(msg, m.Reply):
            return msg.request.rid, "REPLY"
        if isinstance(msg, m.Request):
            return msg.rid, None
        return None, None

    def _send(self, src: int, dst: int, msg) -> None:
        size = len(m.encode(msg))
        rid, phase = self._annotate(msg)
        tag = m.tag_name(msg)
        self.counts[tag] = self.counts.get(tag, 0) + 1
        rec = {"t": round(self.now, 9), "src": src, "dst": dst, "tag": tag, "size": size}
        if rid is not None:
            rec["req"] = rid
        if phase is not None:
            rec["phase"] = phase
        self.trace.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        self._push(self.now + self._delay(src), "deliver", (src, dst, msg))

    def _apply(self, node: int, effects: list) -> None:
        for eff in effects:
            if isinstance(eff, Send):
                self._send(node, eff.dst, eff.msg)
            elif isinstance(eff, SetTimer):
                k = (node, eff.key)
                gen = self.timer_gen.get(k, 0) + 1
                self.timer_gen[k] = gen
                self._push(self.now + eff.delay, "timer", (node, eff.key, gen))
            elif isinstance(eff, CancelTimer):
                k = (node, eff.key)
                if k in self.timer_gen:
                    self.timer_gen[k] += 1
            elif isinstance(eff, Notice):
                self._notice(node, eff)

    def _node(self, i: int):
        return self.replicas[i] if i < self.n else self.clients[i - self.n]

    # -- monitors ------------------------------------------------------------------------

    def _fail(self, invariant: str, detail: str) -> None:
        if self.violation is None:
            self.violation = SafetyViolation(invariant, self.events, detail)

    def _check_sequence(self, node: int, seq: list[str]) -> None:
        for k, rid in enumerate(seq):
            if k < len(self.longest):
                if self.longest[k] != rid:
                    self._fail("prefix", f"replica {node} executed {rid} at position {k}, others {self.longest[k]}")
                    return
            else:
                self.longest.append(rid)

    def _notice(self, node: int, eff: Notice) -> None:
        kind, data = eff.kind, eff.data
        correct = node < self.n and node not in self.byzantine
        if kind == "exec" and node < self.n:
            rid, v, c, result = data
            self.executed[node].append(rid)
            if not correct:
                return
            k = len(self.executed[node]) - 1
            if k < len(self.longest):
                if self.longest[k] != rid:
                    self._fail("prefix", f"replica {node} executed {rid} at position {k}, others {self.longest[k]}")
            else:
                self.longest.append(rid)
            prev = self.slot_exec.setdefault((v, c), rid)
            if prev != rid:
                self._fail("agreement", f"({v},{c}) executed as {prev} and {rid}")
            self.exec_results.setdefault(rid, result)
        elif kind == "rejoined" and node < self.n:
            self.executed[node] = list(data[2])
            if correct:
                self._check_sequence(node, self.executed[node])
        elif kind == "accepted":
            rid, result = data
            if self.exec_results.get(rid) != result:
                self._fail("client-result", f"client accepted {rid}={result!r} that no correct replica produced")
            if rid in self.accepted:
                self._fail("client-result", f"{rid} accepted twice")
            self.accepted[rid] = result
            self.latencies[rid] = round(self.now - self.submitted_at[rid], 9)
            self._push(self.now, "submit", node)
        elif kind == "new_view":
            t, mode, transition, _old = data
            self.new_views.setdefault(t, (mode, transition))
        elif kind == "new_tree":
            self.new_trees += 1
        elif kind == "fallback_secret":
            v, c, secret, _combo = data
            self.fallback_reconstructions += 1
            if self.tees[node].secret_ledger.get((c, v)) != secret:
                self.fallback_mismatches += 1
                self._fail("fallback-secret", f"reconstruction at ({v},{c}) differs from the preprocessed secret")

    def _check_tees(self) -> None:
        for i, tee in enumerate(self.tees):
            issued = tee.issued
            while self.issued_seen[i] < len(issued):
                b = issued[self.issued_seen[i]]
                self.issued_seen[i] += 1
                key = (b.v, b.c)
                if key <= self.issued_last[i]:
                    self._fail("tee-monotonic", f"TEE {i} issued {key} after {self.issued_last[i]}")
                self.issued_last[i] = key

    # -- fault injection -----------------------------------------------------------------

    def _inject(self, spec: FaultSpec) -> None:
        r = self.replicas[spec.target]
        b = r.behaviour
        if spec.kind == "crash":
            b.crashed = True
        elif spec.kind == "silent-shares":
            b.silent_shares = True
        elif spec.kind == "wrong-shares":
            b.wrong_shares = True
        elif spec.kind == "primary-equivocate-attempt":
            b.equivocate = True
        elif spec.kind == "primary-silent":
            b.primary_silent = True
        elif spec.kind == "primary-wrong-result":
            b.wrong_result = True
        elif spec.kind == "unscheduled-reboot":
            # Power loss: volatile TEE state is gone and nothing was persisted.
            r.tee.restore(None)
            r.begin_rejoin()
            self._apply(spec.target, r.out.drain())
        if spec.end is not None and spec.kind not in ("crash", "unscheduled-reboot"):
            self._push(spec.end, "heal", spec)

    def _heal(self, spec: FaultSpec) -> None:
        b = self.replicas[spec.target].behaviour
        attr = {
            "silent-shares": "silent_shares",
            "wrong-shares": "wrong_shares",
            "primary-equivocate-attempt": "equivocate",
            "primary-silent": "primary_silent",
            "primary-wrong-result": "wrong_result",
        }.get(spec.kind)
        if attr is not None:
            setattr(b, attr, False)

    def _next_op(self) -> str:
        key = f"k{self.ops_rng.randrange(4)}"
        roll = self.ops_rng.randrange(3)
        if roll == 0:
            return f"put {key} {self.ops_rng.randrange(100)}"
        if roll == 1:
            return f"incr {key} {self.ops_rng.randrange(1, 10)}"
        return f"get {key}"

    # -- main loop -------------------------------------------------------------------------

    def done(self) -> bool:
        return all(v == 0 for v in self.remaining.values()) and all(c.pending is None for c in self.clients)

    def run(self, until: Optional[Callable[[], bool]] = None) -> RunResult:
        """Process events up to the horizon, or until ``until()`` holds; resumable."""
        while self.heap and self.violation is None:
            if until is not None and until():
                break
            if self.heap[0][0] > self.scn.horizon:
                break
            t, _, kind, payload = heapq.heappop(self.heap)
            self.now = t
            self.events += 1
            if kind == "deliver":
                src, dst, msg = payload
                node = self._node(dst)
                self._apply(dst, node.on_message(src, msg))
            elif kind == "timer":
                node_id, key, gen = payload
                if self.timer_gen.get((node_id, key)) != gen:
                    continue
                self._apply(node_id, self._node(node_id).on_timer(key))
            elif kind == "submit":
                client = self.clients[payload - self.n]
                if self.remaining[payload] > 0 and client.pending is None:
                    self.remaining[payload] -= 1
                    effects = client.submit(self._next_op())
                    self.submitted_at[client.pending.rid] = self.now
                    self._apply(payload, effects)
            elif kind == "fault":
                self._inject(payload)
            elif kind == "heal":
                self._heal(payload)
            self._check_tees()
            if self.done():
                break
        return RunResult(self.scn, self.report(), self.trace, self)

    def report(self) -> MetricsReport:
        expected = self.scn.clients * self.scn.requests
        totals = dict.fromkeys(self.accepted, 0)
        for line in self.trace:
            rec = json.loads(line)
            if rec.get("req") in totals and rec.get("phase") in PHASES:
                totals[rec["req"]] += 1
        mpr = sum(totals.values()) / len(totals) if totals else 0.0
        views = [self.new_views[t] for t in sorted(self.new_views)]
        return MetricsReport(
            counts=dict(sorted(self.counts.items())),
            messages_per_request=round(mpr, 6),
            latencies=dict(self.latencies),
            view_changes=sum(1 for _, transition in views if not transition),
            new_trees=self.new_trees,
            fallback_entries=sum(1 for mode, tr in views if tr and mode == m.MODE_FALLBACK),
            fallback_exits=sum(1 for mode, tr in views if tr and mode == m.MODE_NORMAL),
            completed=len(self.accepted),
            expected=expected,
            safety=self.violation is None,
            liveness=self.violation is None and len(self.accepted) == expected,
            violation=None if self.violation is None else str(self.violation),
            fallback_reconstructions=self.fallback_reconstructions,
            fallback_mismatches=self.fallback_mismatches,
            end_time=round(self.now, 9),
            events=self.events,
        )


def run(scenario: Scenario) -> RunResult:
    return Simulation(scenario).run()


PRIMARY_SCRIPTS = ("crash", "primary-equivocate-attempt", "primary-wrong-result", "primary-silent", "unscheduled-reboot")
BACKUP_SCRIPTS = ("crash", "silent-shares", "wrong-shares", "unscheduled-reboot", "delay-amplify")


def sample_scenario(n: int, seed: int, clients: int = 2, requests: int = 3, chaos: bool = True) -> Scenario:
    """Random mix of at most f faults, reproducible from ``seed``."""
    rng = _sub_rng(seed, f"mix{n}")
    f = (n - 1) // 2
    targets = rng.sample(range(n), rng.randint(0, f))
    faults = []
    for t in sorted(targets):
        kinds = PRIMARY_SCRIPTS if t == 0 else BACKUP_SCRIPTS
        faults.append(FaultSpec(t, rng.choice(kinds), start=round(rng.uniform(0.0, 40.0), 3)))
    gst = round(rng.uniform(0.0, 30.0), 3) if chaos and rng.random() < 0.3 else 0.0
    return Scenario(
        n=n,
        delay=DelayModel(gst=gst, chaos=5.0),
        faults=tuple(faults),
        clients=clients,
        requests=requests,
        seed=seed,
    )
