"""Controller-side refill of the NAT port stack.

The switch pops ports on its own (stage-0 pointer decrement, stack-stage
read). The controller only pushes: it reads which ports are bound by live
reverse / forward contexts, returns the rest to the stack above the pointer
and bumps the pointer register.

A pop and the bind of the popped port happen in one pipeline pass, so every
port that is neither on the stack nor held by a live context is free. Sync
must still not interleave with traffic: a packet that has popped slot ``p``
but not yet read it in the stack stage would see the refilled value. The
controller API serializes sync with packet processing.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

from app.core.context_table import FlowContext
from app.core.pipeline import Pipeline
from app.core.exceptions import StateWriteError
from app.iptables.translator import NAT_PORT_BITS, STATE_NAT_BOUND, STATE_NAT_FORWARD
from app.models.schemas import NatProfile, NatSyncResponse

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class SyncResult:
    pushed: list[int]
    released: list[int]
    free: int
    in_use: int
    exhausted: bool

    def to_response(self) -> NatSyncResponse:
        return NatSyncResponse(
            pushed=self.pushed,
            released=self.released,
            free=self.free,
            in_use=self.in_use,
            exhausted=self.exhausted,
        )


@dataclass
class PortBucket:
    """Controller bookkeeping for one NAT profile."""

    profile: NatProfile
    exhaustion_events: int = 0
    _stacked: set[int] = field(default_factory=set)
    _bound: set[int] = field(default_factory=set)

    @property
    def ports(self) -> range:
        return range(self.profile.port_low, self.profile.port_high + 1)

    def _stack(self, pl: Pipeline) -> tuple[int, list[int]]:
        """Current pointer and the ports in slots below it."""
        pointer_regs = pl.stages[self.profile.pointer_stage].globals
        pointer = pointer_regs.snapshot()[self.profile.pointer_register]
        table = pl.stages[self.profile.stack_stage].table
        if table is None:
            raise StateWriteError(f"stage {self.profile.stack_stage} has no context table")
        slots: dict[int, int] = {}
        for key, ctx in table.items():
            slot = int(key.as_dict()[NAT_PORT_BITS])
            slots[slot] = ctx.state
        return pointer, [slots.get(i, 0) for i in range(pointer)]

    def _in_use(self, pl: Pipeline) -> set[int]:
        used: set[int] = set()
        reverse = pl.stages[self.profile.reverse_stage].table
        forward = pl.stages[self.profile.forward_stage].table
        if reverse is not None:
            used.update(ctx.regs[2] for _, ctx in reverse.items() if ctx.state == STATE_NAT_BOUND)
        if forward is not None:
            used.update(ctx.regs[0] for _, ctx in forward.items() if ctx.state == STATE_NAT_FORWARD)
        return {p for p in used if self.profile.port_low <= p <= self.profile.port_high}

    def sync(self, pl: Pipeline, now: Optional[float] = None) -> SyncResult:
        """Push every free port back onto the stack; lowest port ends up on top."""
        if now is not None:
            pl.evict_expired(now)
        stack_stage = pl.stages[self.profile.stack_stage]
        capacity = stack_stage.table.capacity if stack_stage.table is not None else 0
        registers = pl.stages[self.profile.pointer_stage].globals

        with registers.lock:
            pointer, on_stack = self._stack(pl)
            in_use = self._in_use(pl)
            stacked = {p for p in on_stack if p}
            free = set(self.ports) - in_use - stacked
            # Bound at the last sync, or popped since then, and no longer live.
            released = sorted(free & (self._bound | (self._stacked - stacked)))

            room = max(capacity - pointer, 0)
            pushed = sorted(free, reverse=True)[-room:] if room else []
            for offset, port in enumerate(pushed):
                pl.write_state(
                    self.profile.stack_stage,
                    {NAT_PORT_BITS: pointer + offset},
                    FlowContext(state=port),
                )
            depth = pointer + len(pushed)
            pl.write_globals(self.profile.pointer_stage, {self.profile.pointer_register: depth})

        self._stacked = stacked | set(pushed)
        self._bound = in_use
        exhausted = depth == 0
        if exhausted:
            self.exhaustion_events += 1
            logger.warning(
                "NAT port stack exhausted: %d of %d ports bound", len(in_use), len(self.ports)
            )
        logger.info(
            "NAT sync pushed %d ports (stack depth %d, %d in use)", len(pushed), depth, len(in_use)
        )
        return SyncResult(
            pushed=pushed,
            released=released,
            free=len(free) - len(pushed),
            in_use=len(in_use),
            exhausted=exhausted,
        )


def bootstrap(pl: Pipeline) -> PortBucket:
    """Bucket for the pipeline's NAT profile with its stack filled once."""
    if pl.config.nat is None:
        raise StateWriteError("pipeline has no NAT profile")
    bucket = PortBucket(pl.config.nat)
    bucket.sync(pl)
    return bucket


def port_bucket_sync(bucket: PortBucket, pl: Pipeline, now: Optional[float] = None) -> SyncResult:
    return bucket.sync(pl, now)
