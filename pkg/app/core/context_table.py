"""Per-stage flow context tables and global registers."""
import logging
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from app.core.keys import FlowKey
from app.models.packet import MASK32
from app.models.schemas import NextState

logger = logging.getLogger(__name__)


def to_millis(ts: float) -> int:
    """Timeouts run on millisecond virtual time taken from packet timestamps."""
    return int(round(ts * 1000))


def seconds_to_millis(value: Optional[float]) -> Optional[int]:
    return None if value is None else to_millis(value)


@dataclass(slots=True)
class FlowContext:
    """State label, k registers and timeout bookkeeping (times in ms)."""

    state: int = 0
    regs: list[int] = field(default_factory=list)
    idle_timeout: Optional[int] = None
    hard_timeout: Optional[int] = None
    last_seen: int = 0
    created_at: int = 0

    @classmethod
    def default(cls, k: int) -> "FlowContext":
        return cls(state=0, regs=[0] * k)

    def expired(self, now: int) -> bool:
        if self.idle_timeout is not None and now >= self.last_seen + self.idle_timeout:
            return True
        if self.hard_timeout is not None and now >= self.created_at + self.hard_timeout:
            return True
        return False

    def copy(self) -> "FlowContext":
        return FlowContext(
            self.state, list(self.regs), self.idle_timeout, self.hard_timeout,
            self.last_seen, self.created_at,
        )


class ContextTable:
    """Bounded map from ``FlowKey`` to ``FlowContext``.

    Not synchronized: callers serialize access per key (see the concurrency
    module). Contexts returned by ``lookup`` belong to the table and must be
    treated as read-only.
    """

    def __init__(self, capacity: int, flow_registers: int):
        self.capacity = capacity
        self.flow_registers = flow_registers
        self._entries: dict[FlowKey, FlowContext] = {}
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._entries

    def items(self) -> Iterator[tuple[FlowKey, FlowContext]]:
        return iter(list(self._entries.items()))

    def lookup(self, key: FlowKey, now: int) -> Optional[FlowContext]:
        """Stored, non-expired context or ``None``; refreshes idle timers on hit."""
        ctx = self._entries.get(key)
        if ctx is None:
            return None
        if ctx.expired(now):
            del self._entries[key]
            self.evictions += 1
            return None
        if ctx.idle_timeout is not None:
            ctx.last_seen = now
        return ctx

    def commit(
        self,
        key: FlowKey,
        next_state: NextState,
        regs: Sequence[int],
        now: int,
    ) -> bool:
        """Store (state, regs, timeouts) under ``key``; False when the table is full."""
        current = self._entries.get(key)
        if current is not None and current.expired(now):
            del self._entries[key]
            self.evictions += 1
            current = None
        if current is None and len(self._entries) >= self.capacity:
            self.evict_expired(now)
            if len(self._entries) >= self.capacity:
                return False
        self._entries[key] = FlowContext(
            state=next_state.state,
            regs=list(regs),
            idle_timeout=seconds_to_millis(next_state.idle_timeout),
            hard_timeout=seconds_to_millis(next_state.hard_timeout),
            last_seen=now,
            created_at=current.created_at if current is not None else now,
        )
        return True

    def install(self, key: FlowKey, ctx: FlowContext) -> None:
        """Controller path: place a context verbatim, ignoring capacity."""
        self._entries[key] = ctx

    def evict_expired(self, now: int) -> int:
        expired = [key for key, ctx in list(self._entries.items()) if ctx.expired(now)]
        for key in expired:
            del self._entries[key]
        self.evictions += len(expired)
        if expired:
            logger.debug("Evicted %d expired contexts", len(expired))
        return len(expired)

    def replace_all(self, entries: dict[FlowKey, FlowContext]) -> None:
        self._entries = dict(entries)

    def snapshot(self) -> dict[FlowKey, FlowContext]:
        return {key: ctx.copy() for key, ctx in list(self._entries.items())}


def lookup_context(table: ContextTable, key: FlowKey, now: float) -> FlowContext:
    """Stored context for ``key`` or the default (state 0, registers 0)."""
    ctx = table.lookup(key, to_millis(now))
    return ctx if ctx is not None else FlowContext.default(table.flow_registers)


def commit_context(
    table: ContextTable,
    update_key: FlowKey,
    next_state: Optional[NextState],
    regs: Sequence[int],
    now: float,
) -> bool:
    """Write the context when a next state is given; no write otherwise."""
    if next_state is None:
        return True
    return table.commit(update_key, next_state, regs, to_millis(now))


def evict_expired(table: ContextTable, now: float) -> int:
    return table.evict_expired(to_millis(now))


class GlobalRegisters:
    """Per-stage h x 32-bit registers with atomic multi-register commits."""

    def __init__(self, count: int, initial: Sequence[int] = ()):
        self._values = [0] * count
        for i, value in enumerate(initial):
            self._values[i] = value & MASK32
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._values)

    def snapshot(self) -> tuple[int, ...]:
        with self.lock:
            return tuple(self._values)

    def store(self, values: Sequence[int]) -> None:
        with self.lock:
            self._values = [v & MASK32 for v in values]

    def write(self, index: int, value: int) -> None:
        with self.lock:
            self._values[index] = value & MASK32
