"""Append-only integrity alarm log shared by trusted components."""

from __future__ import annotations

import threading
from dataclasses import dataclass


@dataclass(frozen=True)
class Alarm:
    component: str  # e.g. "server", "block-engine", "storage-node-0", "client-1"
    kind: str       # exception class name, e.g. "SequenceViolation"
    detail: str


class AlarmLog:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._alarms: list[Alarm] = []

    def record(self, component: str, kind: str, detail: str = "") -> None:
        with self._lock:
            self._alarms.append(Alarm(component, kind, detail))

    def record_exc(self, component: str, exc: BaseException) -> None:
        self.record(component, type(exc).__name__, str(exc))

    def all(self) -> list[Alarm]:
        with self._lock:
            return list(self._alarms)

    def count(self, kind: str | None = None) -> int:
        with self._lock:
            if kind is None:
                return len(self._alarms)
            return sum(1 for a in self._alarms if a.kind == kind)

    def kinds(self) -> set[str]:
        with self._lock:
            return {a.kind for a in self._alarms}

    def clear(self) -> None:
        with self._lock:
            self._alarms.clear()
