"""Shared fixtures: the three-port topology, translated programs and packet builders."""
from pathlib import Path
from typing import Callable, Optional

import pytest

from app.core.pipeline import Pipeline
from app.iptables.port_bucket import PortBucket, bootstrap
from app.iptables.rules import parse_rules
from app.iptables.topology import Topology, load_topology
from app.iptables.translator import translate
from app.models.packet import PacketView, parse_ip
from app.models.schemas import PipelineConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

FIREWALL_RULES = """\
iptables -A FORWARD -i e2 -o e1 -j ACCEPT
iptables -A FORWARD -i e1 -o e2 -m state --state ESTABLISHED -j ACCEPT
"""

LB_RULES = """\
iptables -t nat -A PREROUTING -i e0 -d 1.0.0.1 -p tcp --dport 80 \\
    -m statistic --mode nth --every 2 -j DNAT --to-destination 10.0.0.3:80
iptables -t nat -A PREROUTING -i e0 -d 1.0.0.1 -p tcp --dport 80 \\
    -m statistic --mode nth --every 1 -j DNAT --to-destination 10.0.0.2:80
"""

NAT_RULES = "iptables -t nat -A POSTROUTING -i e2 -o e0 -j MASQUERADE\n"

TOPOLOGY = {
    "interfaces": [
        {"name": "e0", "port": 0, "address": "1.0.0.1"},
        {"name": "e1", "port": 1, "subnet": "8.0.0.0/24"},
        {"name": "e2", "port": 2, "subnet": "10.0.0.0/24"},
    ],
    "public_address": "1.0.0.1",
    "uplink": "e0",
    "inside": "e2",
}

PacketFactory = Callable[..., PacketView]


def make_packet(
    src: str,
    dst: str,
    in_port: int,
    ts: float = 0.0,
    proto: int = 6,
    seq: int = 0,
    length: int = 64,
) -> PacketView:
    """``make_packet("10.0.0.2:123", "8.0.0.5:678", in_port=2)``."""
    src_ip, _, src_port = src.partition(":")
    dst_ip, _, dst_port = dst.partition(":")
    return PacketView(
        in_port=in_port,
        ip_src=parse_ip(src_ip),
        ip_dst=parse_ip(dst_ip),
        ip_proto=proto,
        l4_src=int(src_port or 0),
        l4_dst=int(dst_port or 0),
        arrival_seq=seq,
        ts=ts,
        length=length,
    )


@pytest.fixture
def packet() -> PacketFactory:
    return make_packet


@pytest.fixture
def topology() -> Topology:
    return load_topology(TOPOLOGY)


def compile_rules(
    text: str, topo: Topology, port_range: Optional[tuple[int, int]] = None
) -> PipelineConfig:
    return translate(parse_rules(text), topo, port_range=port_range)


@pytest.fixture
def firewall_config(topology: Topology) -> PipelineConfig:
    return compile_rules(FIREWALL_RULES, topology)


@pytest.fixture
def lb_config(topology: Topology) -> PipelineConfig:
    return compile_rules(LB_RULES, topology)


@pytest.fixture
def nat_config(topology: Topology) -> PipelineConfig:
    return compile_rules(NAT_RULES, topology, port_range=(5000, 5002))


@pytest.fixture
def firewall(firewall_config: PipelineConfig) -> Pipeline:
    return Pipeline.from_config(firewall_config)


@pytest.fixture
def lb(lb_config: PipelineConfig) -> Pipeline:
    return Pipeline.from_config(lb_config)


@pytest.fixture
def nat(nat_config: PipelineConfig) -> tuple[Pipeline, PortBucket]:
    pl = Pipeline.from_config(nat_config)
    return pl, bootstrap(pl)
