"""Acyclic chain of OPP stages producing one forwarding decision per packet."""
import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Union

from app.config import settings
from app.core.context_table import ContextTable, FlowContext, GlobalRegisters, to_millis
from app.core.exceptions import StateWriteError
from app.core.keys import FlowKey
from app.core.stage import KeyGuard, Stage, StageOutcome, StageStats, TurnGate
from app.models.enums import Verdict
from app.models.packet import MASK32, PacketView, format_ip
from app.models.schemas import (
    STATE_LABEL_MAX,
    ContextDump,
    PipelineConfig,
    PipelineStateDump,
    StageStateDump,
)

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class StageTrace:
    stage: int
    key: Optional[str]
    state_before: Optional[int]
    entry_index: Optional[int]
    entry_label: Optional[str]
    committed_state: Optional[int]
    verdict: str
    next_stage: Optional[int]

    @classmethod
    def from_outcome(cls, stage: int, outcome: StageOutcome) -> "StageTrace":
        return cls(
            stage=stage,
            key=str(outcome.lookup_key) if outcome.lookup_key is not None else None,
            state_before=outcome.state_before,
            entry_index=outcome.entry_index,
            entry_label=outcome.entry_label,
            committed_state=outcome.committed_state,
            verdict=outcome.verdict.value,
            next_stage=outcome.next_stage,
        )

    def as_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "key": self.key,
            "state_before": self.state_before,
            "entry": self.entry_index,
            "label": self.entry_label,
            "committed_state": self.committed_state,
            "verdict": self.verdict,
            "next_stage": self.next_stage,
        }


@dataclass(slots=True)
class ForwardingDecision:
    verdict: Verdict
    packet: PacketView
    port: Optional[int] = None
    trace: Optional[list[StageTrace]] = field(default=None)

    @property
    def forwarded(self) -> bool:
        return self.verdict is Verdict.FORWARD

    def signature(self) -> tuple[Any, ...]:
        """Verdict plus rewritten headers; what the replay oracle compares."""
        return (self.verdict.value, self.port, self.packet.header_tuple())

    def describe(self) -> str:
        if not self.forwarded:
            return "DROP"
        pkt = self.packet
        return (
            f"OUTPUT({self.port}) {format_ip(pkt.ip_src)}:{pkt.l4_src} -> "
            f"{format_ip(pkt.ip_dst)}:{pkt.l4_dst}"
        )


def _seconds(value: Optional[int]) -> Optional[float]:
    return None if value is None else value / 1000.0


class Pipeline:
    """One device program with its per-stage context tables and globals.

    ``tables``, ``globals_``, ``locks`` and ``gates`` let the concurrency
    layer hand several worker pipelines the same shared objects.
    """

    def __init__(
        self,
        config: PipelineConfig,
        capacity: Optional[int] = None,
        trace: Optional[bool] = None,
        tables: Optional[Mapping[int, ContextTable]] = None,
        globals_: Optional[Mapping[int, GlobalRegisters]] = None,
        locks: Optional[Mapping[int, KeyGuard]] = None,
        gates: Optional[Mapping[int, TurnGate]] = None,
    ):
        self.config = config
        self.capacity = capacity or settings.context_capacity
        self.trace = settings.trace if trace is None else trace
        tables = tables or {}
        globals_ = globals_ or {}
        locks = locks or {}
        gates = gates or {}
        self.stages = [
            Stage(
                stage_cfg,
                index,
                config.params,
                self.capacity,
                table=tables.get(index),
                globals_=globals_.get(index),
                locks=locks.get(index),
                gate=gates.get(index),
            )
            for index, stage_cfg in enumerate(config.stages)
        ]
        self._gated = [i for i, st in enumerate(self.stages) if st.gate is not None]

    @classmethod
    def from_config(cls, config: PipelineConfig, **kwargs: Any) -> "Pipeline":
        pipeline = cls(config, **kwargs)
        logger.debug(
            "Pipeline %s built: %d stages (%d stateful)",
            config.name or "<unnamed>", len(pipeline.stages),
            sum(1 for st in pipeline.stages if st.stateful),
        )
        return pipeline

    def __len__(self) -> int:
        return len(self.stages)

    def _skip_gates(self, lo: int, hi: int, ticket: int) -> None:
        for index in self._gated:
            if lo <= index < hi:
                self.stages[index].gate.skip(ticket)  # type: ignore[union-attr]

    def process_packet(self, pkt: PacketView, ticket: Optional[int] = None) -> ForwardingDecision:
        """Run ``pkt`` from stage 0 until OUTPUT, DROP or the end of the pipeline."""
        trace: Optional[list[StageTrace]] = [] if self.trace else None
        current = pkt
        index = 0
        count = len(self.stages)
        while index < count:
            outcome = self.stages[index].process(current, ticket)
            current = outcome.packet
            if trace is not None:
                trace.append(StageTrace.from_outcome(index, outcome))
            if outcome.verdict is Verdict.CONTINUE:
                target = outcome.next_stage if outcome.next_stage is not None else index + 1
                if ticket is not None:
                    self._skip_gates(index + 1, target, ticket)
                index = target
                continue
            if ticket is not None:
                self._skip_gates(index + 1, count, ticket)
            return ForwardingDecision(outcome.verdict, current, outcome.port, trace)
        return ForwardingDecision(Verdict.DROP, current, None, trace)

    def process(self, packets: Iterable[PacketView]) -> list[ForwardingDecision]:
        return [self.process_packet(pkt) for pkt in packets]

    def _stateful_stage(self, index: int) -> Stage:
        if not 0 <= index < len(self.stages):
            raise StateWriteError(f"no stage {index} (pipeline has {len(self.stages)})")
        stage = self.stages[index]
        if not stage.stateful:
            raise StateWriteError(f"stage {index} is stateless")
        return stage

    def inspect_state(self) -> PipelineStateDump:
        """Read-only snapshot of every stage's contexts, globals and counters."""
        dumps = []
        for stage in self.stages:
            contexts = []
            if stage.table is not None:
                snapshot = stage.table.snapshot()
                for key in sorted(snapshot, key=lambda k: k.values):
                    ctx = snapshot[key]
                    contexts.append(
                        ContextDump(
                            key=key.as_dict(),
                            key_text=str(key),
                            state=ctx.state,
                            regs=list(ctx.regs),
                            idle_timeout=_seconds(ctx.idle_timeout),
                            hard_timeout=_seconds(ctx.hard_timeout),
                            last_seen=ctx.last_seen / 1000.0,
                            created_at=ctx.created_at / 1000.0,
                        )
                    )
            dumps.append(
                StageStateDump(
                    index=stage.index,
                    name=stage.config.name,
                    kind=stage.config.kind,
                    contexts=contexts,
                    globals=list(stage.globals.snapshot()),
                    stats=stage.stats.to_dump(),
                )
            )
        return PipelineStateDump(stages=dumps)

    def resolve_key(
        self, index: int, key: Union[FlowKey, Mapping[str, Union[int, str]]]
    ) -> FlowKey:
        stage = self._stateful_stage(index)
        if isinstance(key, FlowKey):
            return key
        assert stage.lookup_extractor is not None
        try:
            return stage.lookup_extractor.from_mapping(key)
        except Exception as exc:
            raise StateWriteError(f"stage {index}: bad key {dict(key)!r}: {exc}") from exc

    def write_state(
        self,
        index: int,
        key: Union[FlowKey, Mapping[str, Union[int, str]]],
        context: FlowContext,
    ) -> None:
        """Install ``context`` verbatim under ``key`` (controller push)."""
        stage = self._stateful_stage(index)
        if not 0 <= context.state <= STATE_LABEL_MAX:
            raise StateWriteError(f"state label {context.state} outside 16 bits")
        k = self.config.params.flow_registers
        if len(context.regs) > k:
            raise StateWriteError(f"{len(context.regs)} registers exceed k={k}")
        if any(not 0 <= r <= MASK32 for r in context.regs):
            raise StateWriteError("register value outside 32 bits")
        flow_key = self.resolve_key(index, key)
        stored = context.copy()
        stored.regs = list(context.regs) + [0] * (k - len(context.regs))
        guard = stage.locks.hold(flow_key, flow_key) if stage.locks is not None else nullcontext()
        assert stage.table is not None
        with guard:
            stage.table.install(flow_key, stored)

    def write_globals(self, index: int, values: Mapping[int, int]) -> None:
        if not 0 <= index < len(self.stages):
            raise StateWriteError(f"no stage {index} (pipeline has {len(self.stages)})")
        registers = self.stages[index].globals
        for reg, value in values.items():
            if not 0 <= reg < len(registers):
                raise StateWriteError(f"global register G{reg} outside h={len(registers)}")
            if not 0 <= value <= MASK32:
                raise StateWriteError(f"G{reg} value {value} outside 32 bits")
        with registers.lock:
            for reg, value in values.items():
                registers.write(reg, value)

    def evict_expired(self, now: float) -> int:
        total = 0
        now_ms = to_millis(now)
        for stage in self.stages:
            if stage.table is not None:
                guard = stage.locks.hold_all() if stage.locks is not None else nullcontext()
                with guard:
                    evicted = stage.table.evict_expired(now_ms)
                stage.stats.evictions += evicted
                total += evicted
        if total:
            logger.info("Evicted %d expired contexts at t=%.3f", total, now)
        return total

    def stats(self) -> list[StageStats]:
        return [stage.stats for stage in self.stages]
