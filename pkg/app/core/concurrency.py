"""Multi-worker execution: flow-key steering, sharded tables, key locks and ordered stages.

A pipeline is run by W worker pipelines. Packets are steered by a hash of
the steering selectors ``S`` so every context of a *sharded* stage is only
ever touched by one worker. Stages whose keys do not determine ``S``
(metadata keys, cross-flow updates that leave ``S``) keep one *shared*
table guarded by striped key locks. Shared stages and stages that touch
global registers are *ordered*: packets pass them in input order, which
makes a W-worker run reproduce the single-worker run packet for packet.
"""
import hashlib
import itertools
import logging
import math
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack, contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Sequence

from app.config import settings
from app.core.context_table import ContextTable, FlowContext
from app.core.exceptions import WorkerAbortedError
from app.core.keys import FlowKey, KeyExtractor, canonicalize_key
from app.core.logging import bind_worker
from app.core.pipeline import ForwardingDecision, Pipeline
from app.core.stage import StageStats
from app.models.enums import Shardability, StageKind
from app.models.packet import MIRROR, FieldRef, PacketView, parse_field, parse_operand
from app.models.schemas import (
    ExtractorConfig,
    PipelineConfig,
    SetFieldAction,
    SetFieldFromAction,
    StageConfig,
)

logger = logging.getLogger(__name__)

FIVE_TUPLE = ("ip_src", "ip_dst", "ip_proto", "l4_src", "l4_dst")
KEY_LOCK_STRIPES = 256


def steering_hash(key: FlowKey, seed: int) -> int:
    """Keyed 64-bit BLAKE2b over the key bytes."""
    digest = hashlib.blake2b(
        key.values, digest_size=8, key=(seed & (2**64 - 1)).to_bytes(8, "big")
    ).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class SteeringPlan:
    selectors: tuple[str, ...]
    bidirectional: bool
    workers: int
    seed: int
    shardability: Shardability
    sharded_stages: tuple[int, ...] = ()
    shared_stages: tuple[int, ...] = ()
    ordered_stages: tuple[int, ...] = ()
    notes: tuple[str, ...] = ()
    _extractor: KeyExtractor = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        extractor = KeyExtractor(
            ExtractorConfig(selectors=list(self.selectors), bidirectional=self.bidirectional)
        )
        object.__setattr__(self, "_extractor", extractor)

    def with_workers(self, workers: int) -> "SteeringPlan":
        return SteeringPlan(
            self.selectors, self.bidirectional, workers, self.seed, self.shardability,
            self.sharded_stages, self.shared_stages, self.ordered_stages, self.notes,
        )

    def key_for(self, pkt: PacketView) -> FlowKey:
        return self._extractor.extract(pkt)

    def worker_for(self, pkt: PacketView) -> int:
        if self.workers == 1:
            return 0
        return steering_hash(self.key_for(pkt), self.seed) % self.workers

    def worker_for_key(self, key: FlowKey) -> int:
        """Owner of a stored context of a sharded stage."""
        if self.workers == 1:
            return 0
        values = {ref.name: value for ref, value in key.decode() if not ref.is_meta}
        pairs = [(FieldRef(name), values.get(name)) for name in self.selectors]
        return steering_hash(canonicalize_key(pairs, self.bidirectional), self.seed) % self.workers

    def as_dict(self) -> dict[str, Any]:
        return {
            "selectors": list(self.selectors),
            "bidirectional": self.bidirectional,
            "workers": self.workers,
            "hash_seed": self.seed,
            "shardability": self.shardability.value,
            "sharded_stages": list(self.sharded_stages),
            "shared_stages": list(self.shared_stages),
            "ordered_stages": list(self.ordered_stages),
            "notes": list(self.notes),
        }


def _extractor_fields(config: ExtractorConfig) -> tuple[frozenset[str], bool]:
    refs = [parse_field(s) for s in config.selectors]
    return frozenset(r.name for r in refs if not r.is_meta), any(r.is_meta for r in refs)


def _determines(config: ExtractorConfig, candidate: frozenset[str], bidirectional: bool) -> bool:
    """True when equal keys under ``config`` imply equal steering keys over ``candidate``."""
    names, uses_meta = _extractor_fields(config)
    if uses_meta or not candidate <= names:
        return False
    if bidirectional or not config.bidirectional:
        return True
    return not any(name in MIRROR for name in candidate)


def _mirror_closed(candidate: frozenset[str]) -> bool:
    return all(MIRROR[name] in candidate for name in candidate if name in MIRROR)


def _rewritten_fields(stage: StageConfig) -> set[str]:
    written = set()
    for entry in stage.efsm_table:
        for action in entry.actions:
            if isinstance(action, (SetFieldAction, SetFieldFromAction)):
                written.add(parse_field(action.field).name)
    return written


def _touches_globals(stage: StageConfig) -> bool:
    operands: list[Any] = []
    for cond in stage.conditions:
        operands += [cond.lhs, cond.rhs]
    for entry in stage.efsm_table:
        for update in entry.updates:
            operands += [update.dst, update.src1]
            if update.src2 is not None:
                operands.append(update.src2)
        for action in entry.actions:
            source = getattr(action, "source", None)
            if source is not None:
                operands.append(source)
    return any(parse_operand(op).kind == "global_reg" for op in operands)


def _covered_stages(
    config: PipelineConfig, candidate: frozenset[str], bidirectional: bool
) -> set[int]:
    covered = set()
    rewritten: set[str] = set()
    for index, stage in enumerate(config.stages):
        if stage.kind is StageKind.STATEFUL:
            lookup = stage.lookup_extractor
            update = stage.update_extractor or lookup
            assert lookup is not None and update is not None
            keyed = _extractor_fields(lookup)[0] | _extractor_fields(update)[0]
            if (
                not keyed & rewritten
                and _determines(lookup, candidate, bidirectional)
                and _determines(update, candidate, bidirectional)
            ):
                covered.add(index)
        rewritten |= _rewritten_fields(stage)
    return covered


def derive_steering(
    config: PipelineConfig,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
) -> SteeringPlan:
    """Pick the steering selectors that let the most stateful stages shard.

    Candidates are the subsets of header fields named by stateful extractors,
    directed or (mirror-closed) bidirectional. Ties prefer more fields, then
    the bidirectional variant. Stages the winner does not cover are shared.
    """
    workers = workers or settings.workers
    seed = settings.hash_seed if seed is None else seed
    stateful = [i for i, st in enumerate(config.stages) if st.kind is StageKind.STATEFUL]
    universe: set[str] = set()
    for index in stateful:
        stage = config.stages[index]
        for extractor in (stage.lookup_extractor, stage.update_extractor):
            if extractor is not None:
                universe |= _extractor_fields(extractor)[0]

    ordered_fields = [name for name in FIVE_TUPLE + ("in_port", "eth_src", "eth_dst", "eth_type")
                      if name in universe]
    best: Optional[tuple[tuple[int, int, bool], frozenset[str], bool, set[int]]] = None
    for size in range(1, len(ordered_fields) + 1):
        for combo in itertools.combinations(ordered_fields, size):
            candidate = frozenset(combo)
            for bidirectional in (False, True):
                if bidirectional and not (_mirror_closed(candidate) and candidate & set(MIRROR)):
                    continue
                covered = _covered_stages(config, candidate, bidirectional)
                rank = (len(covered), len(candidate), bidirectional)
                if best is None or rank > best[0]:
                    best = (rank, candidate, bidirectional, covered)

    notes: list[str] = []
    selectors: tuple[str, ...]
    covered: set[int]
    if best is None:
        selectors = FIVE_TUPLE
        bidirectional = True
        covered = set()
    else:
        _, candidate, bidirectional, covered = best
        selectors = tuple(name for name in ordered_fields if name in candidate)

    shared = tuple(i for i in stateful if i not in covered)
    for index in shared:
        stage = config.stages[index]
        reason = "keys on metadata" if any(
            _extractor_fields(e)[1] for e in (stage.lookup_extractor, stage.update_extractor) if e
        ) else "keys do not determine the steering selectors"
        notes.append(f"stage {index} shared: {reason}")
    touching = {i for i, st in enumerate(config.stages) if _touches_globals(st)}
    ordered = tuple(sorted(set(shared) | touching))

    plan = SteeringPlan(
        selectors=selectors,
        bidirectional=bidirectional,
        workers=workers,
        seed=seed,
        shardability=Shardability.PARTIALLY_SHARDABLE if shared else Shardability.FULLY_SHARDABLE,
        sharded_stages=tuple(sorted(covered)),
        shared_stages=shared,
        ordered_stages=ordered,
        notes=tuple(notes),
    )
    if shared:
        logger.warning(
            "Pipeline %s is partially shardable; shared stages %s",
            config.name or "<unnamed>", list(shared),
        )
    return plan


def assign_workers(packets: Sequence[PacketView], plan: SteeringPlan) -> list[list[int]]:
    """Indices of ``packets`` per worker, each list in input order."""
    queues: list[list[int]] = [[] for _ in range(plan.workers)]
    for index, pkt in enumerate(packets):
        queues[plan.worker_for(pkt)].append(index)
    return queues


def dispatch(
    batch: Sequence[PacketView],
    plan: SteeringPlan,
    batch_size: Optional[int] = None,
) -> list[list[list[PacketView]]]:
    """Split packets into per-worker batches of at most ``batch_size``."""
    size = batch_size or settings.batch_size
    out = []
    for indices in assign_workers(batch, plan):
        packets = [batch[i] for i in indices]
        out.append([packets[i:i + size] for i in range(0, len(packets), size)])
    return out


class KeyLocks:
    """Striped exclusive locks over flow keys, always taken in stripe order."""

    def __init__(self, stripes: int = KEY_LOCK_STRIPES):
        self._locks = [threading.Lock() for _ in range(stripes)]

    def _stripes(self, *keys: FlowKey) -> list[int]:
        return sorted({hash(key) % len(self._locks) for key in keys})

    @contextmanager
    def hold(self, first: FlowKey, second: FlowKey) -> Iterator[None]:
        with ExitStack() as stack:
            for stripe in self._stripes(first, second):
                stack.enter_context(self._locks[stripe])
            yield

    @contextmanager
    def hold_all(self) -> Iterator[None]:
        with ExitStack() as stack:
            for lock in self._locks:
                stack.enter_context(lock)
            yield


class SequenceGate:
    """Admits tickets 0, 1, 2, ... one at a time; skipped tickets never block."""

    def __init__(self, start: int = 0):
        self._next = start
        self._done: set[int] = set()
        self._cond = threading.Condition()
        self._aborted = False

    @contextmanager
    def turn(self, ticket: int) -> Iterator[None]:
        with self._cond:
            while self._next != ticket:
                if self._aborted:
                    raise WorkerAbortedError("sequence gate aborted")
                self._cond.wait()
        try:
            yield
        finally:
            self.skip(ticket)

    def skip(self, ticket: int) -> None:
        with self._cond:
            self._done.add(ticket)
            while self._next in self._done:
                self._done.discard(self._next)
                self._next += 1
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()


@dataclass
class WorkerReport:
    workers: int
    processed: list[int]
    decisions: list[ForwardingDecision]
    stats: list[StageStats]
    plan: SteeringPlan
    elapsed: float = 0.0

    @property
    def total(self) -> int:
        return sum(self.processed)

    def per_flow(self, packets: Sequence[PacketView]) -> dict[str, list[tuple[Any, ...]]]:
        """Decision signatures grouped by the flow of the input packet."""
        flows: dict[str, list[tuple[Any, ...]]] = {}
        for pkt, decision in zip(packets, self.decisions):
            flows.setdefault(flow_label(pkt), []).append(decision.signature())
        return flows


_FLOW_EXTRACTOR = KeyExtractor(ExtractorConfig(selectors=list(FIVE_TUPLE), bidirectional=True))


def flow_label(pkt: PacketView) -> str:
    """Conversation id: both directions of a 5-tuple share one label."""
    return f"{pkt.ip_proto}/{_FLOW_EXTRACTOR.extract(pkt)}"


def _partition(table: ContextTable, plan: SteeringPlan, capacity: int) -> list[ContextTable]:
    shards = [ContextTable(capacity, table.flow_registers) for _ in range(plan.workers)]
    for key, ctx in table.items():
        shards[plan.worker_for_key(key)].install(key, ctx)
    return shards


def run_parallel(
    pl: Pipeline,
    traffic: Sequence[PacketView],
    workers: int,
    plan: Optional[SteeringPlan] = None,
    seed: Optional[int] = None,
    batch_size: Optional[int] = None,
) -> WorkerReport:
    """Process ``traffic`` on ``workers`` threads; state is merged back into ``pl``.

    The calling thread steers packets and hands each worker its tickets in
    batches of ``batch_size`` through a queue.
    """
    if plan is None:
        plan = derive_steering(pl.config, workers, seed)
    elif plan.workers != workers:
        plan = plan.with_workers(workers)

    started = time.perf_counter()
    if workers == 1:
        decisions = [pl.process_packet(pkt) for pkt in traffic]
        return WorkerReport(
            1, [len(traffic)], decisions, pl.stats(), plan, time.perf_counter() - started
        )

    shared = set(plan.shared_stages)
    shards: dict[int, list[ContextTable]] = {}
    locks: dict[int, KeyLocks] = {}
    for stage in pl.stages:
        if stage.table is None:
            continue
        if stage.index in shared:
            locks[stage.index] = KeyLocks()
        else:
            shard_capacity = math.ceil(stage.table.capacity / workers)
            shards[stage.index] = _partition(stage.table, plan, shard_capacity)
    gates = {index: SequenceGate() for index in plan.ordered_stages}

    worker_pipelines = []
    for w in range(workers):
        tables = {i: pl.stages[i].table for i in shared}
        tables.update({i: parts[w] for i, parts in shards.items()})
        worker_pipelines.append(
            Pipeline(
                pl.config,
                capacity=pl.capacity,
                trace=pl.trace,
                tables=tables,  # type: ignore[arg-type]
                globals_={st.index: st.globals for st in pl.stages},
                locks=locks,
                gates=gates,
            )
        )

    size = batch_size or settings.batch_size
    feeds: list[queue.SimpleQueue[Optional[list[int]]]] = [
        queue.SimpleQueue() for _ in range(workers)
    ]
    decisions: list[Optional[ForwardingDecision]] = [None] * len(traffic)

    def work(w: int) -> int:
        wp = worker_pipelines[w]
        done = 0
        with bind_worker(w):
            try:
                while (tickets := feeds[w].get()) is not None:
                    for ticket in tickets:
                        decisions[ticket] = wp.process_packet(traffic[ticket], ticket)
                    done += len(tickets)
            except WorkerAbortedError:
                raise
            except BaseException:
                logger.error("Worker %d aborted after %d packets", w, done, exc_info=True)
                for gate in gates.values():
                    gate.abort()
                raise
        return done

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="opp-worker") as pool:
        futures = [pool.submit(work, w) for w in range(workers)]
        pending: list[list[int]] = [[] for _ in range(workers)]
        for ticket, pkt in enumerate(traffic):
            w = plan.worker_for(pkt)
            pending[w].append(ticket)
            if len(pending[w]) >= size:
                feeds[w].put(pending[w])
                pending[w] = []
        for w in range(workers):
            if pending[w]:
                feeds[w].put(pending[w])
            feeds[w].put(None)
        errors = [f.exception() for f in futures]
    failures = [e for e in errors if e is not None]
    if failures:
        root = [e for e in failures if not isinstance(e, WorkerAbortedError)]
        raise (root or failures)[0]
    processed = [f.result() for f in futures]

    for index, parts in shards.items():
        table = pl.stages[index].table
        assert table is not None
        merged: dict[FlowKey, FlowContext] = {}
        for part in parts:
            merged.update(part.snapshot())
            table.evictions += part.evictions
        table.replace_all(merged)
    for wp in worker_pipelines:
        for target, source in zip(pl.stats(), wp.stats()):
            target.merge(source)

    elapsed = time.perf_counter() - started
    logger.debug("Parallel run: %d packets on %d workers in %.3fs", len(traffic), workers, elapsed)
    return WorkerReport(
        workers, processed, decisions, pl.stats(), plan, elapsed  # type: ignore[arg-type]
    )
