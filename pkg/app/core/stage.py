"""One OPP processing block: extract, lookup, conditions, EFSM match, actions, update, commit."""
import logging
from collections import Counter
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Any, ContextManager, Optional, Protocol, Sequence, Union

from app.core.context_table import ContextTable, FlowContext, GlobalRegisters, to_millis
from app.core.keys import FlowKey, KeyExtractor
from app.models.enums import AluOp, CondRequirement, ConditionOp, StageKind, TableDefault, Verdict
from app.models.packet import MASK32, FieldRef, OperandRef, PacketView, parse_field, parse_operand
from app.models.schemas import (
    Condition,
    DropAction,
    EfsmEntry,
    EngineParams,
    GotoStageAction,
    NextState,
    OutputAction,
    SetFieldAction,
    SetFieldFromAction,
    SetMetaAction,
    SetMetaFromAction,
    StageConfig,
    StageStatsDump,
)

logger = logging.getLogger(__name__)


class KeyGuard(Protocol):
    def hold(self, first: FlowKey, second: FlowKey) -> ContextManager[Any]: ...

    def hold_all(self) -> ContextManager[Any]: ...


class TurnGate(Protocol):
    def turn(self, ticket: int) -> ContextManager[Any]: ...

    def skip(self, ticket: int) -> None: ...


@dataclass
class StageStats:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    commits: int = 0
    rejected_commits: int = 0
    evictions: int = 0
    table_default_hits: int = 0
    entry_matches: Counter = field(default_factory=Counter)

    def merge(self, other: "StageStats") -> None:
        self.lookups += other.lookups
        self.hits += other.hits
        self.misses += other.misses
        self.commits += other.commits
        self.rejected_commits += other.rejected_commits
        self.evictions += other.evictions
        self.table_default_hits += other.table_default_hits
        self.entry_matches.update(other.entry_matches)

    def to_dump(self) -> StageStatsDump:
        return StageStatsDump(
            lookups=self.lookups,
            hits=self.hits,
            misses=self.misses,
            commits=self.commits,
            rejected_commits=self.rejected_commits,
            evictions=self.evictions,
            table_default_hits=self.table_default_hits,
            entry_matches=dict(sorted(self.entry_matches.items())),
        )


@dataclass(frozen=True, slots=True)
class ConditionVector:
    """c0..c(m-1) packed into an int; bit i is condition i."""

    bits: int
    width: int

    def __getitem__(self, index: int) -> bool:
        if not 0 <= index < self.width:
            raise IndexError(index)
        return bool((self.bits >> index) & 1)

    def __len__(self) -> int:
        return self.width

    def as_tuple(self) -> tuple[bool, ...]:
        return tuple(self[i] for i in range(self.width))


@dataclass(slots=True)
class StageOutcome:
    verdict: Verdict
    packet: PacketView
    port: Optional[int] = None
    next_stage: Optional[int] = None
    entry_index: Optional[int] = None
    entry_label: Optional[str] = None
    lookup_key: Optional[FlowKey] = None
    state_before: Optional[int] = None
    committed_state: Optional[int] = None


GlobalsLike = Union[GlobalRegisters, Sequence[int]]


def _global_values(globals_: GlobalsLike) -> tuple[int, ...]:
    if isinstance(globals_, GlobalRegisters):
        return globals_.snapshot()
    return tuple(globals_)


def read_operand(
    op: OperandRef, pkt: PacketView, ctx: FlowContext, globals_: Sequence[int]
) -> int:
    kind = op.kind
    if kind == "const":
        return op.value
    if kind == "field":
        return op.field.read(pkt)  # type: ignore[union-attr]
    if kind == "flow_reg":
        return ctx.regs[op.index]
    if kind == "global_reg":
        return globals_[op.index]
    return ctx.state


def _alu(op: AluOp, a: int, b: int) -> int:
    if op is AluOp.ADD:
        return (a + b) & MASK32
    if op is AluOp.SUB:
        return (a - b) & MASK32
    if op is AluOp.AND:
        return a & b
    if op is AluOp.OR:
        return a | b
    if op is AluOp.XOR:
        return a ^ b
    if op is AluOp.SHL:
        return (a << (b % 32)) & MASK32
    if op is AluOp.SHR:
        return a >> (b % 32)
    return a


@dataclass(frozen=True, slots=True)
class CompiledUpdate:
    dst: OperandRef
    op: AluOp
    src1: OperandRef
    src2: Optional[OperandRef]


@dataclass(slots=True)
class CompiledEntry:
    """An EFSM entry flattened for the match loop."""

    index: int
    priority: int
    entry: EfsmEntry
    state_value: int
    state_mask: int
    cond_care: int
    cond_value: int
    fields: tuple[tuple[FieldRef, int, int], ...]
    actions: tuple[Any, ...]
    next_state: Optional[NextState]
    updates: tuple[CompiledUpdate, ...]
    reads_globals: bool
    writes_globals: bool

    @classmethod
    def build(cls, index: int, entry: EfsmEntry) -> "CompiledEntry":
        state_value = state_mask = 0
        if entry.match_state is not None:
            state_mask = entry.match_state.mask
            state_value = entry.match_state.value & state_mask
        care = value = 0
        for i, req in enumerate(entry.match_conds):
            if req is CondRequirement.DONT_CARE:
                continue
            care |= 1 << i
            if req is CondRequirement.MUST_TRUE:
                value |= 1 << i
        fields = tuple(
            (parse_field(m.field), m.value & m.mask, m.mask) for m in entry.match_fields
        )
        updates = tuple(
            CompiledUpdate(
                parse_operand(u.dst),
                u.op,
                parse_operand(u.src1),
                parse_operand(u.src2) if u.src2 is not None else None,
            )
            for u in entry.updates
        )
        actions = tuple(_compile_action(a) for a in entry.actions)
        operands = [u.src1 for u in updates] + [u.src2 for u in updates if u.src2 is not None]
        operands += [a[2] for a in actions if a[0] in ("set_field_from", "set_meta_from")]
        return cls(
            index=index,
            priority=entry.priority,
            entry=entry,
            state_value=state_value,
            state_mask=state_mask,
            cond_care=care,
            cond_value=value,
            fields=fields,
            actions=actions,
            next_state=entry.next_state,
            updates=updates,
            reads_globals=any(op.kind == "global_reg" for op in operands),
            writes_globals=any(u.dst.kind == "global_reg" for u in updates),
        )

    def matches(self, state: int, cond_bits: int, pkt: PacketView) -> bool:
        if (state & self.state_mask) != self.state_value:
            return False
        if (cond_bits & self.cond_care) != self.cond_value:
            return False
        for ref, value, mask in self.fields:
            if (ref.read(pkt) & mask) != value:
                return False
        return True


def _compile_action(action: Any) -> tuple[Any, ...]:
    if isinstance(action, OutputAction):
        return ("output", action.port)
    if isinstance(action, DropAction):
        return ("drop",)
    if isinstance(action, GotoStageAction):
        return ("goto", action.stage)
    if isinstance(action, SetFieldAction):
        return ("set", parse_field(action.field), action.value)
    if isinstance(action, SetMetaAction):
        return ("set", parse_field(action.bits), action.value)
    if isinstance(action, SetFieldFromAction):
        return ("set_field_from", parse_field(action.field), parse_operand(action.source))
    if isinstance(action, SetMetaFromAction):
        return ("set_meta_from", parse_field(action.bits), parse_operand(action.source))
    raise TypeError(f"unsupported action {action!r}")


def compile_table(entries: Sequence[EfsmEntry]) -> list[CompiledEntry]:
    """Compile and order by priority; equal priorities keep insertion order."""
    compiled = [CompiledEntry.build(i, e) for i, e in enumerate(entries)]
    compiled.sort(key=lambda c: (c.priority, c.index))
    return compiled


@dataclass(frozen=True, slots=True)
class CompiledCondition:
    op: ConditionOp
    lhs: OperandRef
    rhs: OperandRef

    @classmethod
    def build(cls, cond: Condition) -> "CompiledCondition":
        return cls(cond.op, parse_operand(cond.lhs), parse_operand(cond.rhs))


def _condition_bits(
    conds: Sequence[CompiledCondition],
    pkt: PacketView,
    ctx: FlowContext,
    globals_: Sequence[int],
) -> int:
    bits = 0
    for i, cond in enumerate(conds):
        a = read_operand(cond.lhs, pkt, ctx, globals_)
        b = read_operand(cond.rhs, pkt, ctx, globals_)
        if cond.op is ConditionOp.GT:
            hit = a > b
        elif cond.op is ConditionOp.LT:
            hit = a < b
        else:
            hit = a == b
        if hit:
            bits |= 1 << i
    return bits


def evaluate_conditions(
    pkt: PacketView,
    ctx: FlowContext,
    globals_: GlobalsLike,
    conds: Sequence[Condition],
    width: int = 8,
) -> ConditionVector:
    """Evaluate the condition block; unused slots read as 0."""
    compiled = [CompiledCondition.build(c) for c in conds]
    return ConditionVector(_condition_bits(compiled, pkt, ctx, _global_values(globals_)), width)


def match_entry(
    table: Sequence[Union[EfsmEntry, CompiledEntry]],
    state: int,
    conds: ConditionVector,
    pkt: PacketView,
) -> Optional[EfsmEntry]:
    """First entry, by (priority, insertion order), whose ternary match accepts."""
    if table and isinstance(table[0], CompiledEntry):
        compiled = list(table)  # type: ignore[arg-type]
    else:
        compiled = compile_table(table)  # type: ignore[arg-type]
    for entry in compiled:
        if entry.matches(state, conds.bits, pkt):
            return entry.entry
    return None


def _run_alus(
    updates: Sequence[CompiledUpdate],
    pkt: PacketView,
    ctx: FlowContext,
    globals_: Sequence[int],
) -> tuple[list[int], list[int], list[tuple[FieldRef, int]]]:
    """Two-phase update: read every source from the snapshot, then write."""
    results = []
    for u in updates:
        a = read_operand(u.src1, pkt, ctx, globals_)
        b = read_operand(u.src2, pkt, ctx, globals_) if u.src2 is not None else 0
        results.append(_alu(u.op, a, b))
    regs = list(ctx.regs)
    new_globals = list(globals_)
    meta_writes: list[tuple[FieldRef, int]] = []
    for u, value in zip(updates, results):
        if u.dst.kind == "flow_reg":
            regs[u.dst.index] = value
        elif u.dst.kind == "global_reg":
            new_globals[u.dst.index] = value
        else:
            meta_writes.append((u.dst.field, value))  # type: ignore[arg-type]
    return regs, new_globals, meta_writes


@dataclass(frozen=True, slots=True)
class UpdateResult:
    regs: tuple[int, ...]
    globals: tuple[int, ...]
    metadata: int


def execute_updates(
    entry: EfsmEntry,
    pkt: PacketView,
    ctx: FlowContext,
    globals_: GlobalsLike,
) -> UpdateResult:
    """Apply an entry's update list with parallel-read semantics."""
    compiled = CompiledEntry.build(0, entry)
    regs, new_globals, meta_writes = _run_alus(
        compiled.updates, pkt, ctx, _global_values(globals_)
    )
    scratch = PacketView(metadata=pkt.metadata)
    for ref, value in meta_writes:
        ref.write(scratch, value)
    return UpdateResult(tuple(regs), tuple(new_globals), scratch.metadata)


class Stage:
    """Runtime of one configured stage."""

    def __init__(
        self,
        config: StageConfig,
        index: int,
        params: EngineParams,
        capacity: int,
        table: Optional[ContextTable] = None,
        globals_: Optional[GlobalRegisters] = None,
        locks: Optional[KeyGuard] = None,
        gate: Optional[TurnGate] = None,
    ):
        self.config = config
        self.index = index
        self.params = params
        self.stateful = config.kind is StageKind.STATEFUL
        self.entries = compile_table(config.efsm_table)
        self.conditions = [CompiledCondition.build(c) for c in config.conditions]
        self.globals = globals_ or GlobalRegisters(params.global_registers, config.global_registers)
        self.stats = StageStats()
        self.locks = locks
        self.gate = gate
        self.lookup_extractor: Optional[KeyExtractor] = None
        self.update_extractor: Optional[KeyExtractor] = None
        self.table: Optional[ContextTable] = None
        self._same_keys = True
        if self.stateful:
            assert config.lookup_extractor is not None and config.update_extractor is not None
            self.lookup_extractor = KeyExtractor(config.lookup_extractor)
            self.update_extractor = KeyExtractor(config.update_extractor)
            self._same_keys = config.lookup_extractor == config.update_extractor
            self.table = table if table is not None else ContextTable(
                config.capacity or capacity, params.flow_registers
            )
        self._conditions_read_globals = any(
            "global_reg" in (c.lhs.kind, c.rhs.kind) for c in self.conditions
        )
        self.uses_globals = self._conditions_read_globals or any(
            e.reads_globals or e.writes_globals for e in self.entries
        )
        self._default_regs = [0] * params.flow_registers

    def _default_context(self) -> FlowContext:
        return FlowContext(0, list(self._default_regs))

    def process(self, pkt: PacketView, ticket: Optional[int] = None) -> StageOutcome:
        gate_cm: ContextManager[Any] = nullcontext()
        if self.gate is not None and ticket is not None:
            gate_cm = self.gate.turn(ticket)
        with gate_cm:
            if not self.stateful:
                return self._run(pkt, None, None, self._default_context(), to_millis(pkt.ts))
            assert self.lookup_extractor is not None and self.update_extractor is not None
            lookup_key = self.lookup_extractor.extract(pkt)
            update_key = (
                lookup_key if self._same_keys else self.update_extractor.extract(pkt)
            )
            lock_cm: ContextManager[Any] = (
                self.locks.hold(lookup_key, update_key) if self.locks is not None else nullcontext()
            )
            with lock_cm:
                now = to_millis(pkt.ts)
                table = self.table
                assert table is not None
                before = table.evictions
                self.stats.lookups += 1
                ctx = table.lookup(lookup_key, now)
                self.stats.evictions += table.evictions - before
                if ctx is None:
                    self.stats.misses += 1
                    ctx = self._default_context()
                else:
                    self.stats.hits += 1
                return self._run(pkt, lookup_key, update_key, ctx, now)

    def _run(
        self,
        pkt: PacketView,
        lookup_key: Optional[FlowKey],
        update_key: Optional[FlowKey],
        ctx: FlowContext,
        now: int,
    ) -> StageOutcome:
        if self._conditions_read_globals:
            with self.globals.lock:
                return self._decide(pkt, lookup_key, update_key, ctx, now)
        return self._decide(pkt, lookup_key, update_key, ctx, now)

    def _decide(
        self,
        pkt: PacketView,
        lookup_key: Optional[FlowKey],
        update_key: Optional[FlowKey],
        ctx: FlowContext,
        now: int,
    ) -> StageOutcome:
        gsnap = self.globals.snapshot() if self.uses_globals else ()
        cond_bits = _condition_bits(self.conditions, pkt, ctx, gsnap) if self.conditions else 0

        matched: Optional[CompiledEntry] = None
        for entry in self.entries:
            if entry.matches(ctx.state, cond_bits, pkt):
                matched = entry
                break

        if matched is None:
            self.stats.table_default_hits += 1
            if self.config.table_default is TableDefault.GOTO_NEXT:
                return StageOutcome(
                    Verdict.CONTINUE, pkt.copy(), next_stage=self.index + 1,
                    lookup_key=lookup_key, state_before=ctx.state,
                )
            return StageOutcome(
                Verdict.DROP, pkt.copy(), lookup_key=lookup_key, state_before=ctx.state
            )

        self.stats.entry_matches[matched.index] += 1
        work = pkt.copy()
        outcome = StageOutcome(
            Verdict.CONTINUE,
            work,
            next_stage=self.index + 1,
            entry_index=matched.index,
            entry_label=matched.entry.label,
            lookup_key=lookup_key,
            state_before=ctx.state,
        )
        for action in matched.actions:
            kind = action[0]
            if kind == "set":
                action[1].write(work, action[2])
            elif kind in ("set_field_from", "set_meta_from"):
                action[1].write(work, read_operand(action[2], work, ctx, gsnap))
            elif kind == "output":
                outcome.verdict = Verdict.FORWARD
                outcome.port = action[1]
                outcome.next_stage = None
            elif kind == "drop":
                outcome.verdict = Verdict.DROP
                outcome.next_stage = None
            else:
                outcome.next_stage = action[1]

        if matched.updates:
            if matched.reads_globals or matched.writes_globals:
                with self.globals.lock:
                    gsnap = self.globals.snapshot()
                    regs, new_globals, meta_writes = _run_alus(matched.updates, pkt, ctx, gsnap)
                    if matched.writes_globals:
                        self.globals.store(new_globals)
            else:
                regs, _, meta_writes = _run_alus(matched.updates, pkt, ctx, gsnap)
            for ref, value in meta_writes:
                ref.write(work, value)
        else:
            regs = ctx.regs

        if matched.next_state is not None and self.table is not None and update_key is not None:
            before = self.table.evictions
            committed = self.table.commit(update_key, matched.next_state, regs, now)
            self.stats.evictions += self.table.evictions - before
            if committed:
                self.stats.commits += 1
                outcome.committed_state = matched.next_state.state
            else:
                self.stats.rejected_commits += 1
                logger.warning(
                    "Stage %d: context table full (%d), commit for %s rejected",
                    self.index, self.table.capacity, update_key,
                    extra={"stage": self.index},
                )
        return outcome
