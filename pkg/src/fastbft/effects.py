"""Side effects a node hands back to its host after each handler call."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Hashable


@dataclass(frozen=True)
class Send:
    dst: int
    msg: Any


@dataclass(frozen=True)
class SetTimer:
    key: Hashable
    delay: float


@dataclass(frozen=True)
class CancelTimer:
    key: Hashable


@dataclass(frozen=True)
class Notice:
    """Observable event for monitors and metrics (execution, view install, ...)."""

    kind: str
    data: Any = None


class Outbox:
    def __init__(self) -> None:
        self.items: list = []

    def send(self, dst: int, msg: Any) -> None:
        self.items.append(Send(dst, msg))

    def set_timer(self, key: Hashable, delay: float) -> None:
        self.items.append(SetTimer(key, delay))

    def cancel_timer(self, key: Hashable) -> None:
        self.items.append(CancelTimer(key))

    def notice(self, kind: str, data: Any = None) -> None:
        self.items.append(Notice(kind, data))

    def drain(self) -> list:
        out, self.items = self.items, []
        return out
