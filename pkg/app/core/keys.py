"""Flow keys: canonical byte strings built from selector values."""
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

from app.core.exceptions import PipelineLoadError
from app.models.packet import ADDRESS_FIELDS, FieldRef, PacketView, format_ip, parse_field, parse_ip
from app.models.schemas import ExtractorConfig

# Endpoint pairs swapped by bidirectional extractors, (address, port) per side.
_SRC_SIDE = ("ip_src", "l4_src")
_DST_SIDE = ("ip_dst", "l4_dst")


@dataclass(frozen=True, slots=True)
class FlowKey:
    """Identifies a flow context; equality is over the value bytes only."""

    values: bytes
    field_ids: tuple[FieldRef, ...] = field(default=(), compare=False, hash=False)

    def decode(self) -> list[tuple[FieldRef, int]]:
        out = []
        offset = 0
        for ref in self.field_ids:
            width = ref.byte_width
            out.append((ref, int.from_bytes(self.values[offset:offset + width], "big")))
            offset += width
        return out

    def as_dict(self) -> dict[str, Union[int, str]]:
        """``field=value`` rendering used by state dumps."""
        return {
            str(ref): format_ip(value) if ref.name in ADDRESS_FIELDS else value
            for ref, value in self.decode()
        }

    def __str__(self) -> str:
        parts: list[str] = []
        decoded = self.decode()
        i = 0
        while i < len(decoded):
            ref, value = decoded[i]
            if ref.name in ADDRESS_FIELDS:
                text = format_ip(value)
                port_name = "l4_src" if ref.name == "ip_src" else "l4_dst"
                if i + 1 < len(decoded) and decoded[i + 1][0].name == port_name:
                    text = f"{text}:{decoded[i + 1][1]}"
                    i += 1
                parts.append(text)
            else:
                parts.append(str(value))
            i += 1
        return "{" + ",".join(parts) + "}"


def _endpoint(values: Mapping[str, int], side: tuple[str, str]) -> int:
    return (values.get(side[0], 0) << 16) | values.get(side[1], 0)


def canonicalize_key(
    fields: Sequence[tuple[FieldRef, Optional[int]]],
    bidirectional: bool = False,
) -> FlowKey:
    """Build the canonical key for ordered (selector, value) pairs.

    Under ``bidirectional`` the (ip_src, l4_src) and (ip_dst, l4_dst) pairs
    are compared as one integer each and the smaller pair is placed on the
    source side, so both directions of a flow produce the same bytes.
    """
    by_name: dict[str, int] = {}
    for ref, value in fields:
        if value is None:
            raise PipelineLoadError(f"missing value for selector {ref}")
        if not ref.is_meta:
            by_name[ref.name] = value

    swap = bidirectional and _endpoint(by_name, _SRC_SIDE) > _endpoint(by_name, _DST_SIDE)

    chunks = []
    for ref, value in fields:
        if swap and ref.name in by_name and ref.mirrored().name in by_name:
            value = by_name[ref.mirrored().name]
        chunks.append((value & ref.mask).to_bytes(ref.byte_width, "big"))  # type: ignore[operator]
    return FlowKey(b"".join(chunks), tuple(ref for ref, _ in fields))


class KeyExtractor:
    """Compiled form of an ``ExtractorConfig``."""

    __slots__ = ("selectors", "bidirectional", "_swappable", "_header_names")

    def __init__(self, config: ExtractorConfig):
        self.selectors: tuple[FieldRef, ...] = tuple(parse_field(s) for s in config.selectors)
        self.bidirectional = config.bidirectional
        names = {ref.name for ref in self.selectors if not ref.is_meta}
        self._header_names = frozenset(names)
        self._swappable = self.bidirectional and any(
            n in names for n in _SRC_SIDE + _DST_SIDE
        )

    @property
    def uses_metadata(self) -> bool:
        return any(ref.is_meta for ref in self.selectors)

    @property
    def header_names(self) -> frozenset[str]:
        return self._header_names

    def extract(self, pkt: PacketView) -> FlowKey:
        swap = False
        if self._swappable:
            names = self._header_names
            src = ((pkt.ip_src if "ip_src" in names else 0) << 16) | (
                pkt.l4_src if "l4_src" in names else 0
            )
            dst = ((pkt.ip_dst if "ip_dst" in names else 0) << 16) | (
                pkt.l4_dst if "l4_dst" in names else 0
            )
            swap = src > dst
        chunks = []
        for ref in self.selectors:
            source = ref.mirrored() if swap else ref
            chunks.append(source.read(pkt).to_bytes(ref.byte_width, "big"))
        return FlowKey(b"".join(chunks), self.selectors)

    def from_mapping(self, values: Mapping[str, Union[int, str]]) -> FlowKey:
        """Build a key from ``field=value`` pairs (controller writes, dumps)."""
        pairs: list[tuple[FieldRef, Optional[int]]] = []
        for ref in self.selectors:
            raw = values.get(str(ref))
            if raw is None:
                pairs.append((ref, None))
            elif isinstance(raw, str):
                pairs.append((ref, parse_ip(raw) if ref.name in ADDRESS_FIELDS else int(raw, 0)))
            else:
                pairs.append((ref, int(raw)))
        return canonicalize_key(pairs, self.bidirectional)


def extract_key(pkt: PacketView, config: ExtractorConfig) -> FlowKey:
    return KeyExtractor(config).extract(pkt)
