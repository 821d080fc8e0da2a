"""Immutable runtime state: queue environments and local environments.

A queue environment maps each ordered pair of roles to the FIFO of messages
sent from the first to the second and not yet received; this is the entire
asynchrony model.  A local environment maps each role to its current local
type.  Both are value objects: operations return new instances, and empty
queues are normalised away so structural equality is semantic equality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .types import Label, LocalType, Role, Sort

QueueKey = tuple[Role, Role]
QueueMsg = tuple[Label, Sort]


@dataclass(frozen=True)
class QueueEnv:
    entries: tuple[tuple[QueueKey, tuple[QueueMsg, ...]], ...]  # sorted, no empty queues

    @staticmethod
    def empty() -> "QueueEnv":
        return _EMPTY_QUEUES

    @staticmethod
    def of(mapping: dict[QueueKey, Iterable[QueueMsg]]) -> "QueueEnv":
        items = tuple(sorted(((k, tuple(v)) for k, v in mapping.items() if tuple(v)), key=lambda e: e[0]))
        return QueueEnv(items)

    def get(self, key: QueueKey) -> tuple[QueueMsg, ...]:
        for k, msgs in self.entries:
            if k == key:
                return msgs
        return ()

    def _with(self, key: QueueKey, msgs: tuple[QueueMsg, ...]) -> "QueueEnv":
        rest = tuple((k, v) for k, v in self.entries if k != key)
        if msgs:
            rest = tuple(sorted(rest + ((key, msgs),), key=lambda e: e[0]))
        return QueueEnv(rest)

    def enq(self, key: QueueKey, msg: QueueMsg) -> "QueueEnv":
        """Append ``msg`` at the tail of ``key``'s FIFO."""
        return self._with(key, self.get(key) + (msg,))

    def deq(self, key: QueueKey) -> Optional[tuple[QueueMsg, "QueueEnv"]]:
        """Head and remainder of ``key``'s FIFO, or None when it is empty."""
        msgs = self.get(key)
        if not msgs:
            return None
        return msgs[0], self._with(key, msgs[1:])

    def push_front(self, key: QueueKey, msg: QueueMsg) -> "QueueEnv":
        return self._with(key, (msg,) + self.get(key))

    def is_empty(self) -> bool:
        return not self.entries


_EMPTY_QUEUES = QueueEnv(())


@dataclass(frozen=True)
class LocalEnv:
    entries: tuple[tuple[Role, LocalType], ...]  # sorted by role

    @staticmethod
    def of(mapping: dict[Role, LocalType]) -> "LocalEnv":
        return LocalEnv(tuple(sorted(mapping.items(), key=lambda e: e[0])))

    def roles(self) -> tuple[Role, ...]:
        return tuple(r for r, _ in self.entries)

    def get(self, role: Role) -> LocalType:
        for r, l in self.entries:
            if r == role:
                return l
        raise KeyError(role)

    def set(self, role: Role, l: LocalType) -> "LocalEnv":
        rest = tuple((r, v) for r, v in self.entries if r != role)
        return LocalEnv(tuple(sorted(rest + ((role, l),), key=lambda e: e[0])))

    def as_dict(self) -> dict[Role, LocalType]:
        return dict(self.entries)
