"""Test-only builders for small TEE groups."""

import random

from fastbft.primitives import make_provider
from fastbft.tee import TEE, KeyRegistry
from fastbft.topology import build_tree


def genesis_key(i: int, seed: int = 0) -> bytes:
    return random.Random(f"key{seed}/{i}").randbytes(16)


def make_group(n: int, provider=None, seed: int = 0, tree=True, actives=None):
    """n TEEs sharing one registry, in view 0 with replica 0 as primary."""
    provider = provider or make_provider("fast")
    tees = [TEE(i, provider, random.Random(f"{seed}/{i}")) for i in range(n)]
    reg = KeyRegistry({t.id: t.verify_key for t in tees}, {t.id: t.enc_key for t in tees})
    for t in tees:
        t.install_registry(reg)
    f = (n - 1) // 2
    topo = build_tree(0, list(actives or range(f + 1))) if tree else None
    keys = {i: genesis_key(i, seed) for i in range(n)}
    for t in tees:
        t.genesis(range(n), topo, keys)
    return tees, reg, topo


class Tap:
    """Wraps a simulation to record every send and every replica's handler effects."""

    def __init__(self, scenario, drop=None):
        from fastbft.simnet import Simulation

        self.sent = []
        self.handled = []  # (node, src, msg, effects)
        self.drop = drop
        tap = self

        class _Sim(Simulation):
            def _send(self, src, dst, msg):
                tap.sent.append((src, dst, msg))
                if tap.drop is not None and tap.drop(src, dst, msg):
                    return
                super()._send(src, dst, msg)

        self.sim = _Sim(scenario)
        for r in self.sim.replicas:
            self._wrap(r)

    def _wrap(self, r):
        inner = r.on_message

        def on_message(src, msg):
            effects = inner(src, msg)
            self.handled.append((r.id, src, msg, effects))
            return effects

        r.on_message = on_message
        inner_timer = r.on_timer

        def on_timer(key):
            effects = inner_timer(key)
            self.handled.append((r.id, None, key, effects))
            return effects

        r.on_timer = on_timer

    def run(self, until=None):
        return self.sim.run(until)

    def settle(self, span=50.0):
        """Keep delivering traffic for ``span`` more time units after the clients are done."""
        sim = self.sim
        stop = sim.now + span
        sim.done = lambda: False
        try:
            sim.run(until=lambda: not sim.heap or sim.heap[0][0] > stop)
        finally:
            del sim.done

    def messages(self, kind, src=None, dst=None):
        return [
            (s, d, msg)
            for s, d, msg in self.sent
            if isinstance(msg, kind) and (src is None or s == src) and (dst is None or d == dst)
        ]

    def notices(self, kind, node=None):
        from fastbft.effects import Notice

        return [
            eff.data
            for who, _, _, effects in self.handled
            for eff in effects
            if isinstance(eff, Notice) and eff.kind == kind and (node is None or who == node)
        ]

    def deliver(self, node, src, msg):
        """Hand a message straight to a replica and apply what it does."""
        effects = self.sim.replicas[node].on_message(src, msg)
        self.sim._apply(node, effects)
        return effects

    def call(self, node, fn, *args):
        """Invoke a replica method directly and apply its queued effects."""
        r = self.sim.replicas[node]
        fn(*args)
        effects = r.out.drain()
        self.handled.append((node, "call", fn.__name__, effects))
        self.sim._apply(node, effects)
        return effects
