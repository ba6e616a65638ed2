"""Classic pcap input/output for replay traffic."""
import logging
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import netaddr
from scapy.error import Scapy_Exception
from scapy.layers.inet import IP, TCP, UDP
from scapy.layers.l2 import Ether
from scapy.packet import Padding
from scapy.utils import PcapWriter, RawPcapReader

from app.core.exceptions import PcapLoadError
from app.models.packet import PacketView, format_ip

logger = logging.getLogger(__name__)

DLT_EN10MB = 1
GLOBAL_HEADER = 24
RECORD_HEADER = 16
ETH_TYPE_IPV4 = 0x0800

# Generated frames carry their ingress port in the last octet of eth_src.
PORT_MAC_BASE = 0x02_00_00_00_00_00


def port_mac(port: int) -> int:
    return PORT_MAC_BASE | (port & 0xFF)


def _mac_text(value: int) -> str:
    return str(netaddr.EUI(value, dialect=netaddr.mac_unix_expanded))


@dataclass(slots=True)
class IngestStats:
    frames: int = 0
    packets: int = 0
    skipped: int = 0


def _in_port(eth_src: int, port_map: Optional[Mapping[int, int]]) -> int:
    if port_map and eth_src in port_map:
        return port_map[eth_src]
    if eth_src & ~0xFF == PORT_MAC_BASE:
        return eth_src & 0xFF
    return 0


def _view(data: bytes, index: int, ts: float, wirelen: int,
          port_map: Optional[Mapping[int, int]]) -> Optional[PacketView]:
    frame = Ether(data)
    if frame.type != ETH_TYPE_IPV4 or IP not in frame:
        return None
    ip = frame[IP]
    eth_src = int(netaddr.EUI(frame.src))
    l4_src = l4_dst = 0
    if TCP in ip:
        l4_src, l4_dst = ip[TCP].sport, ip[TCP].dport
    elif UDP in ip:
        l4_src, l4_dst = ip[UDP].sport, ip[UDP].dport
    return PacketView(
        in_port=_in_port(eth_src, port_map),
        eth_src=eth_src,
        eth_dst=int(netaddr.EUI(frame.dst)),
        eth_type=frame.type,
        ip_src=int(netaddr.IPAddress(ip.src)),
        ip_dst=int(netaddr.IPAddress(ip.dst)),
        ip_proto=ip.proto,
        l4_src=l4_src,
        l4_dst=l4_dst,
        arrival_seq=index,
        ts=ts,
        length=wirelen,
    )


def read_pcap(
    path: Union[str, Path],
    port_map: Optional[Mapping[int, int]] = None,
) -> tuple[list[PacketView], IngestStats]:
    """Parse an Ethernet capture; non-IPv4 frames are counted and dropped."""
    path = Path(path)
    size = path.stat().st_size
    stats = IngestStats()
    packets: list[PacketView] = []
    offset = 0
    try:
        reader = RawPcapReader(str(path))
    except Scapy_Exception as exc:
        raise PcapLoadError(f"not a classic pcap file: {exc}", 0) from exc
    with reader:
        if reader.linktype != DLT_EN10MB:
            raise PcapLoadError(f"link type {reader.linktype} is not Ethernet", 20)
        scale = 1_000_000_000 if getattr(reader, "nano", False) else 1_000_000
        offset = GLOBAL_HEADER
        for data, meta in reader:
            if len(data) != meta.caplen:
                raise PcapLoadError(
                    f"record truncated: {len(data)} of {meta.caplen} bytes", offset
                )
            ts = (meta.sec * scale + meta.usec) / scale
            view = _view(data, stats.packets, ts, meta.wirelen, port_map)
            stats.frames += 1
            offset += RECORD_HEADER + meta.caplen
            if view is None:
                stats.skipped += 1
                continue
            packets.append(view)
            stats.packets += 1
    if offset != size:
        raise PcapLoadError(f"{size - offset} trailing bytes after last record", offset)
    return packets, stats


def ingest_pcap(
    path: Union[str, Path],
    port_map: Optional[Mapping[int, int]] = None,
) -> list[PacketView]:
    packets, stats = read_pcap(path, port_map)
    logger.info(
        "Read %d packets from %s (%d non-IPv4 frames skipped)",
        stats.packets, path, stats.skipped,
    )
    return packets


def _frame(pkt: PacketView) -> Ether:
    eth = Ether(src=_mac_text(pkt.eth_src), dst=_mac_text(pkt.eth_dst), type=pkt.eth_type)
    ip = IP(src=format_ip(pkt.ip_src), dst=format_ip(pkt.ip_dst), proto=pkt.ip_proto)
    if pkt.ip_proto == 6:
        frame = eth / ip / TCP(sport=pkt.l4_src, dport=pkt.l4_dst)
    elif pkt.ip_proto == 17:
        frame = eth / ip / UDP(sport=pkt.l4_src, dport=pkt.l4_dst)
    else:
        frame = eth / ip
    missing = pkt.length - len(frame)
    if missing > 0:
        frame = frame / Padding(load=b"\x00" * missing)
    frame.time = Decimal(repr(pkt.ts))
    return frame


def write_pcap(packets: Iterable[PacketView], path: Union[str, Path]) -> int:
    """Write microsecond-resolution Ethernet frames; returns the frame count."""
    count = 0
    with PcapWriter(str(path), linktype=DLT_EN10MB, sync=False) as writer:
        for pkt in packets:
            writer.write(_frame(pkt))
            count += 1
    logger.debug("Wrote %d frames to %s", count, path)
    return count
