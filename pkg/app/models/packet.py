"""Packet view, field selectors and operand references."""
import re
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Union

import netaddr

MASK32 = 0xFFFFFFFF
METADATA_BITS = 32

# Header fields a selector may name, with their bit widths.
HEADER_WIDTHS: dict[str, int] = {
    "in_port": 16,
    "eth_src": 48,
    "eth_dst": 48,
    "eth_type": 16,
    "ip_src": 32,
    "ip_dst": 32,
    "ip_proto": 8,
    "l4_src": 16,
    "l4_dst": 16,
}

ADDRESS_FIELDS = frozenset({"ip_src", "ip_dst"})

# Direction swap applied by bidirectional extractors and steering.
MIRROR: dict[str, str] = {
    "ip_src": "ip_dst",
    "ip_dst": "ip_src",
    "l4_src": "l4_dst",
    "l4_dst": "l4_src",
    "eth_src": "eth_dst",
    "eth_dst": "eth_src",
}

_META_RE = re.compile(r"^meta\[(\d+):(\d+)\]$")
_REG_RE = re.compile(r"^([RG])(\d+)$")


@dataclass(slots=True)
class PacketView:
    """Parsed headers plus the inter-stage metadata word."""

    in_port: int = 0
    eth_src: int = 0
    eth_dst: int = 0
    eth_type: int = 0x0800
    ip_src: int = 0
    ip_dst: int = 0
    ip_proto: int = 6
    l4_src: int = 0
    l4_dst: int = 0
    metadata: int = 0
    arrival_seq: int = 0
    ts: float = 0.0
    length: int = 64

    def copy(self) -> "PacketView":
        return replace(self)

    def header_tuple(self) -> tuple[int, ...]:
        """Header fields that actions may rewrite, in declaration order."""
        return (
            self.eth_src, self.eth_dst, self.eth_type, self.ip_src, self.ip_dst,
            self.ip_proto, self.l4_src, self.l4_dst,
        )

    def reversed(self, in_port: int) -> "PacketView":
        """The reply direction of this packet, entering on ``in_port``."""
        return replace(
            self,
            in_port=in_port,
            eth_src=self.eth_dst,
            eth_dst=self.eth_src,
            ip_src=self.ip_dst,
            ip_dst=self.ip_src,
            l4_src=self.l4_dst,
            l4_dst=self.l4_src,
            metadata=0,
        )

    def describe(self) -> str:
        return (
            f"{format_ip(self.ip_src)}:{self.l4_src} -> "
            f"{format_ip(self.ip_dst)}:{self.l4_dst} (port {self.in_port})"
        )


PACKET_FIELD_NAMES = tuple(f.name for f in fields(PacketView))


def parse_ip(value: Union[int, str]) -> int:
    if isinstance(value, int):
        return value & MASK32
    return int(netaddr.IPAddress(value, version=4))


def format_ip(value: int) -> str:
    return str(netaddr.IPAddress(value, version=4))


@dataclass(frozen=True, slots=True)
class FieldRef:
    """A header field or a metadata bit range ``meta[hi:lo]``."""

    name: str
    hi: int = 0
    lo: int = 0

    @property
    def is_meta(self) -> bool:
        return self.name == "meta"

    @property
    def width(self) -> int:
        if self.is_meta:
            return self.hi - self.lo + 1
        return HEADER_WIDTHS[self.name]

    @property
    def mask(self) -> int:
        return (1 << self.width) - 1

    @property
    def byte_width(self) -> int:
        return (self.width + 7) // 8

    def read(self, pkt: PacketView) -> int:
        if self.is_meta:
            return (pkt.metadata >> self.lo) & self.mask
        return getattr(pkt, self.name)

    def write(self, pkt: PacketView, value: int) -> None:
        value &= self.mask
        if self.is_meta:
            cleared = pkt.metadata & ~(self.mask << self.lo) & MASK32
            pkt.metadata = cleared | (value << self.lo)
        else:
            setattr(pkt, self.name, value)

    def mirrored(self) -> "FieldRef":
        if self.name in MIRROR:
            return FieldRef(MIRROR[self.name])
        return self

    def __str__(self) -> str:
        if self.is_meta:
            return f"meta[{self.hi}:{self.lo}]"
        return self.name


def parse_field(raw: str) -> FieldRef:
    """Parse ``"ip_src"`` / ``"meta[3:0]"``; raises ValueError on unknown ids."""
    text = raw.strip()
    if text in HEADER_WIDTHS:
        return FieldRef(text)
    if text == "metadata":
        return FieldRef("meta", METADATA_BITS - 1, 0)
    match = _META_RE.match(text)
    if match is None:
        raise ValueError(f"unknown field id {raw!r}")
    hi, lo = int(match.group(1)), int(match.group(2))
    if lo > hi or hi >= METADATA_BITS:
        raise ValueError(f"metadata range {raw!r} outside 32 bits")
    return FieldRef("meta", hi, lo)


@dataclass(frozen=True, slots=True)
class OperandRef:
    """Source/destination of a condition, update or ``*_FROM`` action."""

    kind: str  # field | flow_reg | global_reg | const | state
    field: Optional[FieldRef] = None
    index: int = 0
    value: int = 0

    def __str__(self) -> str:
        if self.kind == "field":
            return str(self.field)
        if self.kind == "flow_reg":
            return f"R{self.index}"
        if self.kind == "global_reg":
            return f"G{self.index}"
        if self.kind == "state":
            return "state"
        return str(self.value)

    def to_wire(self) -> Union[int, str]:
        return self.value if self.kind == "const" else str(self)


def parse_operand(raw: Union[int, str]) -> OperandRef:
    if isinstance(raw, bool):
        raise ValueError("boolean is not an operand")
    if isinstance(raw, int):
        if not 0 <= raw <= MASK32:
            raise ValueError(f"constant {raw} outside 32 bits")
        return OperandRef("const", value=raw)
    text = raw.strip()
    if text == "state":
        return OperandRef("state")
    reg = _REG_RE.match(text)
    if reg is not None:
        kind = "flow_reg" if reg.group(1) == "R" else "global_reg"
        return OperandRef(kind, index=int(reg.group(2)))
    if text.isdigit():
        return parse_operand(int(text))
    return OperandRef("field", field=parse_field(text))
