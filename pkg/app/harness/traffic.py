"""Deterministic synthetic traffic."""
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import netaddr

from app.harness.pcap import port_mac, write_pcap
from app.models.enums import DirectionPattern, InterArrival
from app.models.packet import PacketView
from app.models.schemas import TrafficSpec

logger = logging.getLogger(__name__)

BACK_TO_BACK_GAP_US = 1
HANDSHAKE_PACKETS = 3


@dataclass(slots=True, frozen=True)
class _Flow:
    client: int
    server: int
    client_l4: int
    server_l4: int
    size: int


def _hosts(subnet: str) -> list[int]:
    network = netaddr.IPNetwork(subnet, version=4)
    hosts = [int(ip) for ip in network.iter_hosts()] or [int(network.ip)]
    return hosts


def _flows(spec: TrafficSpec, rng: random.Random) -> list[_Flow]:
    clients = _hosts(spec.client_subnet)
    servers = _hosts(spec.server_subnet)
    low, high = spec.client_ports
    space = len(clients) * len(servers) * (high - low + 1) * len(set(spec.server_ports))
    if spec.flows > space:
        raise ValueError(f"{spec.flows} flows requested, address/port space holds {space}")
    seen: set[tuple[int, int, int, int]] = set()
    flows = []
    while len(flows) < spec.flows:
        flow = _Flow(
            client=rng.choice(clients),
            server=rng.choice(servers),
            client_l4=rng.randint(low, high),
            server_l4=rng.choice(spec.server_ports),
            size=rng.choice(spec.sizes),
        )
        ident = (flow.client, flow.server, flow.client_l4, flow.server_l4)
        if ident in seen:
            continue
        seen.add(ident)
        flows.append(flow)
    return flows


def _directions(pattern: DirectionPattern, count: int) -> list[bool]:
    """True for client-to-server packets, in per-flow order."""
    if pattern is DirectionPattern.UNIDIRECTIONAL:
        return [True] * count
    if pattern is DirectionPattern.REQUEST_REPLY:
        return [i % 2 == 0 for i in range(count)]
    handshake = [True, False, True][:count]
    return handshake + [True] * (count - len(handshake))


def _packet(spec: TrafficSpec, flow: _Flow, forward: bool) -> PacketView:
    if forward:
        return PacketView(
            in_port=spec.client_port,
            eth_src=port_mac(spec.client_port),
            eth_dst=port_mac(spec.server_port),
            ip_src=flow.client,
            ip_dst=flow.server,
            ip_proto=spec.protocol,
            l4_src=flow.client_l4,
            l4_dst=flow.server_l4,
            length=flow.size,
        )
    return PacketView(
        in_port=spec.server_port,
        eth_src=port_mac(spec.server_port),
        eth_dst=port_mac(spec.client_port),
        ip_src=flow.server,
        ip_dst=flow.client,
        ip_proto=spec.protocol,
        l4_src=flow.server_l4,
        l4_dst=flow.client_l4,
        length=flow.size,
    )


def gen_traffic(
    spec: TrafficSpec,
    seed: int = 0,
    pcap_path: Optional[Union[str, Path]] = None,
) -> list[PacketView]:
    """Interleave the flows of ``spec`` at random while keeping each flow's order."""
    rng = random.Random(seed)
    flows = _flows(spec, rng)
    directions = _directions(spec.pattern, spec.packets_per_flow)
    sent = [0] * len(flows)
    active = list(range(len(flows)))
    if spec.inter_arrival is InterArrival.FIXED_RATE:
        gap_us = 1_000_000 / spec.rate_pps
    else:
        gap_us = BACK_TO_BACK_GAP_US
    start_us = round(spec.start * 1_000_000)

    packets: list[PacketView] = []
    while active:
        slot = rng.randrange(len(active))
        f = active[slot]
        pkt = _packet(spec, flows[f], directions[sent[f]])
        pkt.arrival_seq = len(packets)
        pkt.ts = (start_us + round(len(packets) * gap_us)) / 1e6
        packets.append(pkt)
        sent[f] += 1
        if sent[f] == spec.packets_per_flow:
            active[slot] = active[-1]
            active.pop()

    logger.debug("Generated %d packets over %d flows (seed %d)", len(packets), len(flows), seed)
    if pcap_path is not None:
        write_pcap(packets, pcap_path)
    return packets
