"""Replay traffic through a pipeline and check it against the serial run."""
import hashlib
import json
import logging
from collections import Counter
from typing import Any, Optional, Sequence

from app.core.concurrency import (
    SteeringPlan,
    WorkerReport,
    derive_steering,
    flow_label,
    run_parallel,
)
from app.core.exceptions import OracleMismatchError
from app.core.pipeline import ForwardingDecision, Pipeline
from app.models.packet import PacketView
from app.models.schemas import RunReport, WorkerRate

logger = logging.getLogger(__name__)

REPLY_GAP = 1e-6


def _digest(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def clone_pipeline(pl: Pipeline) -> Pipeline:
    """Independent pipeline with a copy of ``pl``'s contexts and globals."""
    copy = Pipeline.from_config(pl.config, capacity=pl.capacity, trace=pl.trace)
    for source, target in zip(pl.stages, copy.stages):
        if source.table is not None and target.table is not None:
            target.table.replace_all(source.table.snapshot())
        target.globals.store(source.globals.snapshot())
    return copy


def reflect(decisions: Sequence[ForwardingDecision], after: float) -> list[PacketView]:
    """Replies to every forwarded packet, entering where the packet left."""
    replies = []
    for decision in decisions:
        if decision.forwarded and decision.port is not None:
            reply = decision.packet.reversed(decision.port)
            reply.arrival_seq = len(replies)
            reply.ts = after + (len(replies) + 1) * REPLY_GAP
            replies.append(reply)
    return replies


def _run_rounds(
    pl: Pipeline,
    traffic: Sequence[PacketView],
    workers: int,
    plan: SteeringPlan,
    reflect_rounds: int,
    batch_size: Optional[int] = None,
) -> tuple[list[PacketView], list[ForwardingDecision], list[WorkerReport]]:
    inputs: list[PacketView] = []
    decisions: list[ForwardingDecision] = []
    reports = []
    batch = list(traffic)
    for round_ in range(reflect_rounds + 1):
        if not batch:
            break
        report = run_parallel(pl, batch, workers, plan=plan, batch_size=batch_size)
        reports.append(report)
        inputs.extend(batch)
        decisions.extend(report.decisions)
        if round_ < reflect_rounds:
            batch = reflect(report.decisions, batch[-1].ts)
    return inputs, decisions, reports


def per_flow(
    inputs: Sequence[PacketView], decisions: Sequence[ForwardingDecision]
) -> dict[str, list[tuple[Any, ...]]]:
    flows: dict[str, list[tuple[Any, ...]]] = {}
    for pkt, decision in zip(inputs, decisions):
        flows.setdefault(flow_label(pkt), []).append(decision.signature())
    return flows


def compare_flows(
    expected: dict[str, list[tuple[Any, ...]]], actual: dict[str, list[tuple[Any, ...]]]
) -> None:
    """Raise on the first flow (by label) whose decision sequence differs."""
    for label in sorted(set(expected) | set(actual)):
        want = expected.get(label, [])
        got = actual.get(label, [])
        if want == got:
            continue
        for i, (a, b) in enumerate(zip(want, got)):
            if a != b:
                raise OracleMismatchError(label, f"packet {i}: expected {a}, got {b}")
        raise OracleMismatchError(label, f"expected {len(want)} decisions, got {len(got)}")


def state_digest(pl: Pipeline) -> str:
    dump = pl.inspect_state()
    payload = [
        {
            "stage": stage.index,
            "globals": stage.globals,
            "contexts": [
                (c.key_text, c.state, c.regs, c.idle_timeout, c.last_seen)
                for c in stage.contexts
            ],
        }
        for stage in dump.stages
    ]
    return _digest(payload)


def replay(
    pl: Pipeline,
    traffic: Sequence[PacketView],
    workers: int = 1,
    oracle: bool = False,
    reflect_rounds: int = 0,
    plan: Optional[SteeringPlan] = None,
    seed: Optional[int] = None,
    batch_size: Optional[int] = None,
    decisions_out: Optional[list[ForwardingDecision]] = None,
) -> RunReport:
    """Run ``traffic`` on ``workers`` and summarize; ``oracle`` re-runs it serially."""
    if plan is None:
        plan = derive_steering(pl.config, workers, seed)
    else:
        plan = plan.with_workers(workers)
    reference = clone_pipeline(pl) if oracle else None

    inputs, decisions, reports = _run_rounds(
        pl, traffic, workers, plan, reflect_rounds, batch_size
    )
    if decisions_out is not None:
        decisions_out.extend(decisions)
    flows = per_flow(inputs, decisions)

    matched: Optional[bool] = None
    if reference is not None:
        serial_inputs, serial_decisions, _ = _run_rounds(
            reference, traffic, 1, plan.with_workers(1), reflect_rounds
        )
        compare_flows(per_flow(serial_inputs, serial_decisions), flows)
        matched = True

    elapsed = sum(r.elapsed for r in reports)
    processed = [0] * workers
    for report in reports:
        for w, count in enumerate(report.processed):
            processed[w] += count
    verdicts = Counter(
        d.verdict.value if d.port is None else f"{d.verdict.value}:{d.port}" for d in decisions
    )
    run = RunReport(
        workers=workers,
        packets=len(inputs),
        elapsed=elapsed,
        pps=len(inputs) / elapsed if elapsed > 0 else 0.0,
        per_worker=[
            WorkerRate(worker=w, packets=n, pps=n / elapsed if elapsed > 0 else 0.0)
            for w, n in enumerate(processed)
        ],
        verdicts=dict(sorted(verdicts.items())),
        verdict_digest=_digest(sorted(verdicts.items())),
        flow_digest=_digest(sorted(flows.items())),
        state_digest=state_digest(pl),
        flows=len(flows),
        shardability=plan.shardability,
        ordered_stages=list(plan.ordered_stages),
        stages=[stats.to_dump() for stats in pl.stats()],
        oracle=matched,
    )
    logger.info(
        "Replay finished: %d packets, %d flows, %d workers, %.0f pps",
        run.packets, run.flows, workers, run.pps,
    )
    return run
