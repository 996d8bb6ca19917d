"""Deterministic key-value state machine replicated by the protocol.

Operations are short strings: ``put k v``, ``get k`` and ``incr k d``.  A
result is a canonical JSON document holding the output value and the
post-image of every key the operation wrote, so a replica that only sees the
result can apply it as a state delta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .primitives import sha256


def parse_op(op: str) -> tuple[str, list[str]]:
    parts = op.split()
    if not parts:
        raise ValueError("empty operation")
    return parts[0], parts[1:]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class KVStore:
    data: dict[str, int | str] = field(default_factory=dict)
    # client id -> (last executed seq, its result)
    cache: dict[int, tuple[int, str]] = field(default_factory=dict)

    def compute(self, op: str) -> str:
        """Result of ``op`` against the current state, without applying it."""
        try:
            name, args = parse_op(op)
        except ValueError:
            return _dumps({"err": "bad op", "set": {}})
        if name == "put" and len(args) == 2:
            return _dumps({"out": args[1], "set": {args[0]: args[1]}})
        if name == "get" and len(args) == 1:
            return _dumps({"out": self.data.get(args[0]), "set": {}})
        if name == "incr" and len(args) == 2:
            cur = self.data.get(args[0], 0)
            try:
                new = int(cur) + int(args[1])
            except ValueError:
                return _dumps({"err": "not a number", "set": {}})
            return _dumps({"out": new, "set": {args[0]: new}})
        return _dumps({"err": "bad op", "set": {}})

    def apply_result(self, result: str) -> None:
        self.data.update(json.loads(result).get("set", {}))

    def executed(self, client: int, seq: int) -> str | None:
        """Cached result if (client, seq) already ran."""
        last = self.cache.get(client)
        if last is not None and last[0] >= seq:
            return last[1] if last[0] == seq else ""
        return None

    def execute(self, client: int, seq: int, op: str) -> tuple[str, bool]:
        """Run an operation once; returns (result, freshly_applied)."""
        cached = self.executed(client, seq)
        if cached is not None:
            return cached, False
        result = self.compute(op)
        self.apply_result(result)
        self.cache[client] = (seq, result)
        return result, True

    def apply_delta(self, client: int, seq: int, result: str) -> bool:
        if self.executed(client, seq) is not None:
            return False
        self.apply_result(result)
        self.cache[client] = (seq, result)
        return True

    def snapshot(self) -> dict:
        return {"data": self.data, "cache": {str(k): list(v) for k, v in self.cache.items()}}

    @classmethod
    def from_snapshot(cls, snap: dict) -> "KVStore":
        cache = {int(k): (int(v[0]), str(v[1])) for k, v in snap["cache"].items()}
        return cls(dict(snap["data"]), cache)

    def digest(self) -> bytes:
        return sha256(_dumps(self.snapshot()).encode())
