"""Command line entry point: ``opp run|bench|translate|inspect|steering|serve``."""
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from app.config import settings
from app.core.concurrency import derive_steering
from app.core.exceptions import OppError, OracleMismatchError
from app.core.logging import setup_logging
from app.core.pipeline import ForwardingDecision, Pipeline
from app.core.serialization import (
    dump_document,
    dump_pipeline,
    load_pipeline,
    serialize_pipeline,
)
from app.harness.bench import bench as run_bench
from app.harness.pcap import ingest_pcap
from app.harness.replay import replay
from app.harness.traffic import gen_traffic
from app.iptables.port_bucket import bootstrap
from app.iptables.rules import parse_rules
from app.iptables.topology import load_topology
from app.iptables.translator import translate
from app.models.packet import PacketView
from app.models.schemas import PipelineConfig, TrafficSpec

logger = logging.getLogger(__name__)

ORACLE_MISMATCH_EXIT = 2

existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)


def _int_list(ctx: click.Context, param: click.Parameter, value: str) -> list[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def _load_config(
    config: Optional[Path], rules: Optional[Path], topology: Optional[Path]
) -> PipelineConfig:
    if config is not None:
        return load_pipeline(config)
    if rules is None or topology is None:
        raise click.UsageError("give --config, or --rules together with --topology")
    return translate(parse_rules(rules.read_text()), load_topology(topology))


def _load_traffic(pcap: Optional[Path], spec: Optional[Path], seed: int) -> list[PacketView]:
    if pcap is not None:
        return ingest_pcap(pcap)
    if spec is not None:
        return gen_traffic(TrafficSpec.model_validate_json(spec.read_text()), seed)
    return []


def _program_options(fn):
    fn = click.option("--topology", type=existing_file, help="Topology JSON for --rules.")(fn)
    fn = click.option("--rules", type=existing_file, help="iptables rule file.")(fn)
    fn = click.option("--config", "-c", type=existing_file, help="Pipeline document.")(fn)
    return fn


def _traffic_options(fn):
    fn = click.option("--seed", type=int, default=0, show_default=True,
                      help="Traffic generator seed.")(fn)
    fn = click.option("--spec", type=existing_file, help="TrafficSpec JSON to generate.")(fn)
    fn = click.option("--pcap", type=existing_file, help="Capture to replay.")(fn)
    return fn


@click.group()
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL.")
@click.version_option(settings.app_version, prog_name=settings.app_name)
def cli(log_level: Optional[str]) -> None:
    """OPP software switch."""
    setup_logging(log_level)


@cli.command()
@_program_options
@_traffic_options
@click.option("--workers", "-w", type=int, default=settings.workers, show_default=True)
@click.option("--batch", type=int, default=settings.batch_size, show_default=True)
@click.option("--hash-seed", type=int, default=None, help="Steering hash key.")
@click.option("--oracle", is_flag=True, help="Also run one worker and compare per flow.")
@click.option("--trace", is_flag=True, help="Print per-packet stage traces.")
@click.option("--reflect", type=int, default=0, show_default=True,
              help="Rounds of replies generated from forwarded packets.")
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path))
def run(
    config: Optional[Path],
    rules: Optional[Path],
    topology: Optional[Path],
    pcap: Optional[Path],
    spec: Optional[Path],
    seed: int,
    workers: int,
    batch: int,
    hash_seed: Optional[int],
    oracle: bool,
    trace: bool,
    reflect: int,
    output: Optional[Path],
) -> None:
    """Replay traffic through a pipeline and print the run report."""
    try:
        program = _load_config(config, rules, topology)
        traffic = _load_traffic(pcap, spec, seed)
        if pcap is None and spec is None:
            raise click.UsageError("give --pcap or --spec")
        pl = Pipeline.from_config(program, trace=trace)
        if program.nat is not None:
            bootstrap(pl)
        decisions: list[ForwardingDecision] = []
        report = replay(
            pl, traffic, workers,
            oracle=oracle,
            reflect_rounds=reflect,
            seed=hash_seed,
            batch_size=batch,
            decisions_out=decisions,
        )
    except OracleMismatchError as exc:
        click.echo(f"oracle mismatch: {exc}", err=True)
        sys.exit(ORACLE_MISMATCH_EXIT)
    except OppError as exc:
        raise click.ClickException(str(exc)) from exc

    if trace:
        for decision in decisions:
            steps = [step.as_dict() for step in decision.trace or []]
            click.echo(json.dumps({"decision": decision.describe(), "trace": steps}), err=True)
    document = dump_document(report)
    if output is not None:
        output.write_text(document)
    click.echo(document)


@cli.command()
@click.option("--kind", type=click.Choice(["stateless", "stateful"]), default="stateless",
              show_default=True)
@click.option("--stages", default="1", show_default=True, callback=_int_list,
              help="Stage counts, comma separated.")
@click.option("--workers", default="1,2,4", show_default=True, callback=_int_list)
@click.option("--sizes", default="64", show_default=True, callback=_int_list)
@click.option("--packets", type=int, default=100_000, show_default=True)
@click.option("--flows", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--every-packet-updates", is_flag=True,
              help="Stateful stages write state on every packet.")
@click.option("--backend", type=click.Choice(["auto", "thread", "process"]), default="auto",
              show_default=True)
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path),
              help="Write the JSON results here.")
@click.option("--table", type=click.Path(dir_okay=False, path_type=Path),
              help="Write the tab-separated table here.")
def bench(
    kind: str,
    stages: list[int],
    workers: list[int],
    sizes: list[int],
    packets: int,
    flows: int,
    seed: int,
    every_packet_updates: bool,
    backend: str,
    output: Optional[Path],
    table: Optional[Path],
) -> None:
    """Throughput sweep over worker and stage counts."""
    try:
        report = run_bench(
            kind,  # type: ignore[arg-type]
            stage_counts=stages,
            worker_counts=workers,
            sizes=sizes,
            packets=packets,
            flows=flows,
            seed=seed,
            every_packet_updates=every_packet_updates,
            backend=backend,  # type: ignore[arg-type]
        )
    except (OppError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    if output is not None:
        output.write_text(dump_document(report))
    if table is not None:
        table.write_text(report.table() + "\n")
    click.echo(report.table())


@cli.command("translate")
@click.option("--rules", type=existing_file, required=True)
@click.option("--topology", type=existing_file, required=True)
@click.option("--idle-timeout", type=float, default=None,
              help="Overrides CONNTRACK_IDLE_TIMEOUT (seconds).")
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path))
def translate_cmd(
    rules: Path, topology: Path, idle_timeout: Optional[float], output: Optional[Path]
) -> None:
    """Compile an iptables rule file into a pipeline document."""
    try:
        program = translate(parse_rules(rules.read_text()), load_topology(topology), idle_timeout)
    except OppError as exc:
        raise click.ClickException(str(exc)) from exc
    if output is not None:
        document = dump_pipeline(program, output)
    else:
        document = serialize_pipeline(program)
    click.echo(document.decode("utf-8"))


@cli.command()
@_program_options
@_traffic_options
@click.option("--now", type=float, default=None, help="Evict contexts expired at this time.")
def inspect(
    config: Optional[Path],
    rules: Optional[Path],
    topology: Optional[Path],
    pcap: Optional[Path],
    spec: Optional[Path],
    seed: int,
    now: Optional[float],
) -> None:
    """Dump stage state, after optionally running traffic through it."""
    try:
        program = _load_config(config, rules, topology)
        pl = Pipeline.from_config(program)
        if program.nat is not None:
            bootstrap(pl)
        pl.process(_load_traffic(pcap, spec, seed))
        if now is not None:
            pl.evict_expired(now)
    except OppError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(dump_document(pl.inspect_state()))


@cli.command()
@_program_options
@click.option("--workers", "-w", type=int, default=4, show_default=True)
@click.option("--hash-seed", type=int, default=None)
def steering(
    config: Optional[Path],
    rules: Optional[Path],
    topology: Optional[Path],
    workers: int,
    hash_seed: Optional[int],
) -> None:
    """Show how a pipeline shards across workers."""
    try:
        plan = derive_steering(_load_config(config, rules, topology), workers, hash_seed)
    except OppError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(plan.as_dict(), indent=2))


@cli.command()
@click.option("--host", default=settings.host, show_default=True)
@click.option("--port", type=int, default=settings.port, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the controller REST API."""
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port, log_config=None)


if __name__ == "__main__":
    cli()
