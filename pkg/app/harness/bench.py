"""Throughput sweeps over worker count, stage count and packet size."""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Literal, Sequence

from app.config import settings
from app.core.concurrency import assign_workers, derive_steering, run_parallel
from app.core.pipeline import Pipeline
from app.core.serialization import parse_pipeline, serialize_pipeline
from app.harness.traffic import gen_traffic
from app.models.enums import AluOp, StageKind, TableDefault
from app.models.packet import PacketView
from app.models.schemas import (
    BenchPoint,
    BenchReport,
    EfsmEntry,
    ExtractorConfig,
    FieldMatch,
    GotoStageAction,
    NextState,
    OutputAction,
    PipelineConfig,
    StageConfig,
    TernaryState,
    TrafficSpec,
    UpdateInstruction,
)

logger = logging.getLogger(__name__)

PipelineKind = Literal["stateless", "stateful"]
Backend = Literal["auto", "thread", "process"]

FLOW_KEY = ExtractorConfig(selectors=["ip_src", "ip_dst", "ip_proto", "l4_src", "l4_dst"])
BENCH_IDLE_TIMEOUT = 3600.0


def _verdict(index: int, stages: int) -> list:
    if index == stages - 1:
        return [OutputAction(port=1)]
    return [GotoStageAction(stage=index + 1)]


def synthetic_pipeline(
    kind: PipelineKind, stages: int = 1, every_packet_updates: bool = False
) -> PipelineConfig:
    """Chain of ``stages`` plain MATs or per-flow packet counters.

    With ``every_packet_updates`` each stateful stage commits on every packet,
    otherwise only a flow's first packet writes state.
    """
    if stages < 1:
        raise ValueError("a synthetic pipeline needs at least one stage")
    default = TableDefault(settings.table_default)
    chain = []
    for i in range(stages):
        if kind == "stateless":
            entries = [
                EfsmEntry(
                    label="forward",
                    match_fields=[FieldMatch(field="in_port", value=2)],
                    actions=_verdict(i, stages),
                )
            ]
            chain.append(
                StageConfig(kind=StageKind.STATELESS, name=f"mat-{i}", efsm_table=entries,
                            table_default=default)
            )
            continue
        count = UpdateInstruction(dst="R0", op=AluOp.ADD, src1="R0", src2=1)
        counting = NextState(state=1, idle_timeout=BENCH_IDLE_TIMEOUT)
        if every_packet_updates:
            entries = [
                EfsmEntry(label="count", actions=_verdict(i, stages),
                          next_state=counting, updates=[count])
            ]
        else:
            entries = [
                EfsmEntry(label="first", match_state=TernaryState(value=0),
                          actions=_verdict(i, stages), next_state=counting, updates=[count]),
                EfsmEntry(label="known", actions=_verdict(i, stages)),
            ]
        chain.append(
            StageConfig(kind=StageKind.STATEFUL, name=f"counter-{i}", lookup_extractor=FLOW_KEY,
                        efsm_table=entries, table_default=default)
        )
    return PipelineConfig(name=f"synthetic-{kind}-{stages}", ports=3, stages=chain)


def _timed_shard(document: bytes, packets: list[PacketView]) -> float:
    pl = Pipeline.from_config(parse_pipeline(document))
    started = time.perf_counter()
    for pkt in packets:
        pl.process_packet(pkt)
    return time.perf_counter() - started


def _measure_processes(config: PipelineConfig, traffic: list[PacketView], workers: int) -> float:
    """Slowest worker's compute time; state never crosses processes."""
    plan = derive_steering(config, workers)
    queues = assign_workers(traffic, plan)
    document = serialize_pipeline(config)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_timed_shard, document, [traffic[i] for i in queue]) for queue in queues
        ]
        return max(f.result() for f in futures)


def measure(
    config: PipelineConfig,
    traffic: list[PacketView],
    workers: int,
    backend: Backend = "auto",
) -> tuple[float, str]:
    """Elapsed seconds for one run and the backend that ran it."""
    ordered = derive_steering(config, workers).ordered_stages
    use_processes = workers > 1 and not ordered and backend != "thread"
    if backend == "process" and ordered:
        logger.warning("Pipeline has ordered stages %s; measuring with threads", list(ordered))
    if use_processes:
        return _measure_processes(config, traffic, workers), "process"
    report = run_parallel(Pipeline.from_config(config), traffic, workers)
    return report.elapsed, "thread"


def bench(
    kind: PipelineKind = "stateless",
    stage_counts: Sequence[int] = (1,),
    worker_counts: Sequence[int] = (1, 2, 4),
    sizes: Sequence[int] = (64,),
    packets: int = 100_000,
    flows: int = 64,
    seed: int = 0,
    every_packet_updates: bool = False,
    backend: Backend = "auto",
) -> BenchReport:
    report = BenchReport()
    for size in sizes:
        if packets > 0 and flows > 0:
            spec = TrafficSpec(
                flows=flows, packets_per_flow=max(1, math.ceil(packets / flows)), sizes=[size]
            )
            traffic = gen_traffic(spec, seed)[:packets]
        else:
            traffic = []
        for stages in stage_counts:
            config = synthetic_pipeline(kind, stages, every_packet_updates)
            for workers in worker_counts:
                elapsed, used = measure(config, traffic, workers, backend)
                point = BenchPoint(
                    kind=kind,
                    stages=stages,
                    workers=workers,
                    packet_size=size,
                    packets=len(traffic),
                    elapsed=elapsed,
                    pps=len(traffic) / elapsed if elapsed > 0 else 0.0,
                    backend=used,
                )
                logger.info(
                    "bench %s stages=%d workers=%d size=%d: %.0f pps (%s)",
                    kind, stages, workers, size, point.pps, used,
                )
                report.points.append(point)
    return report
