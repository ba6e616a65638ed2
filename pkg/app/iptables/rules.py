"""Parser for the supported iptables rule subset."""
import logging
import re
from enum import Enum
from typing import Iterator, Optional

import netaddr
from pydantic import BaseModel, ConfigDict

from app.core.exceptions import RuleParseError

logger = logging.getLogger(__name__)


class Command(str, Enum):
    APPEND = "append"
    INSERT = "insert"
    DELETE = "delete"


class Target(str, Enum):
    ACCEPT = "ACCEPT"
    DROP = "DROP"
    DNAT = "DNAT"
    MASQUERADE = "MASQUERADE"


TABLE_CHAINS = {
    "filter": {"FORWARD"},
    "nat": {"PREROUTING", "POSTROUTING"},
}

PROTOCOLS = {"tcp": 6, "udp": 17, "icmp": 1}

# Matches that inspect payload or keep their own tables.
UNSUPPORTED_MATCHES = {"string", "u32", "bpf", "recent", "connmark", "mark", "layer7", "l7"}

_COMMANDS = {
    "-A": Command.APPEND, "--append": Command.APPEND,
    "-I": Command.INSERT, "--insert": Command.INSERT,
    "-D": Command.DELETE, "--delete": Command.DELETE,
}


class IptablesRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: Command
    table: str = "filter"
    chain: str
    position: Optional[int] = None
    in_iface: Optional[str] = None
    out_iface: Optional[str] = None
    source: Optional[str] = None
    destination: Optional[str] = None
    protocol: Optional[str] = None
    sport: Optional[int] = None
    dport: Optional[int] = None
    states: tuple[str, ...] = ()
    nth_every: Optional[int] = None
    nth_packet: Optional[int] = None
    target: Target
    to_destination: Optional[str] = None
    to_port: Optional[int] = None
    text: str = ""

    def same_rule(self, other: "IptablesRule") -> bool:
        """Identity used by ``-D``: everything but the command and its position."""
        skip = {"command", "position", "text"}
        return self.model_dump(exclude=skip) == other.model_dump(exclude=skip)

    @property
    def protocol_number(self) -> Optional[int]:
        if self.protocol is None:
            return None
        return PROTOCOLS.get(self.protocol, None) or int(self.protocol)


class _Tokens:
    """Whitespace tokens with their 1-based columns."""

    def __init__(self, text: str):
        self.items = [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", text)]
        self.pos = 0
        self.end_column = len(text) + 1

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return self

    def __next__(self) -> tuple[str, int]:
        if self.pos >= len(self.items):
            raise StopIteration
        item = self.items[self.pos]
        self.pos += 1
        return item

    def peek(self) -> Optional[str]:
        return self.items[self.pos][0] if self.pos < len(self.items) else None

    def value(self, option: str, column: int) -> tuple[str, int]:
        if self.pos >= len(self.items):
            raise RuleParseError(f"option {option} needs a value", self.end_column, option)
        return next(self)


def _port(raw: str, column: int) -> int:
    if not raw.isdigit() or not 0 < int(raw) <= 65535:
        raise RuleParseError(f"bad port {raw!r}", column, raw)
    return int(raw)


def _address(raw: str, column: int) -> str:
    try:
        network = netaddr.IPNetwork(raw, version=4)
    except (netaddr.AddrFormatError, ValueError) as exc:
        raise RuleParseError(f"bad IPv4 address {raw!r}", column, raw) from exc
    return str(network) if network.prefixlen < 32 else str(network.ip)


def parse_rule(text: str) -> IptablesRule:
    """Parse one ``iptables ...`` command line."""
    tokens = _Tokens(text)
    fields: dict[str, object] = {"text": text.strip()}
    states: list[str] = []
    match_modules: list[str] = []

    first = tokens.peek()
    if first in ("iptables", "/sbin/iptables", "/usr/sbin/iptables"):
        next(tokens)

    for token, column in tokens:
        if token == "!":
            raise RuleParseError("negated matches are not supported", column, token)
        if token in ("-t", "--table"):
            table, col = tokens.value(token, column)
            if table not in TABLE_CHAINS:
                raise RuleParseError(f"unsupported table {table!r}", col, table)
            fields["table"] = table
        elif token in _COMMANDS:
            if "command" in fields:
                raise RuleParseError("more than one command", column, token)
            fields["command"] = _COMMANDS[token]
            chain, _ = tokens.value(token, column)
            fields["chain"] = chain
            fields["_chain_column"] = column
            nxt = tokens.peek()
            if fields["command"] is Command.INSERT and nxt is not None and nxt.isdigit():
                raw, col = next(tokens)
                if int(raw) < 1:
                    raise RuleParseError("insert position is 1-based", col, raw)
                fields["position"] = int(raw)
        elif token in ("-i", "--in-interface"):
            fields["in_iface"], _ = tokens.value(token, column)
        elif token in ("-o", "--out-interface"):
            fields["out_iface"], _ = tokens.value(token, column)
        elif token in ("-s", "--source", "--src"):
            raw, col = tokens.value(token, column)
            fields["source"] = _address(raw, col)
        elif token in ("-d", "--destination", "--dst"):
            raw, col = tokens.value(token, column)
            fields["destination"] = _address(raw, col)
        elif token in ("-p", "--protocol"):
            raw, col = tokens.value(token, column)
            proto = raw.lower()
            if proto not in PROTOCOLS and not (proto.isdigit() and int(proto) < 256):
                raise RuleParseError(f"unsupported protocol {raw!r}", col, raw)
            fields["protocol"] = proto
        elif token in ("--dport", "--destination-port"):
            raw, col = tokens.value(token, column)
            fields["dport"] = _port(raw, col)
        elif token in ("--sport", "--source-port"):
            raw, col = tokens.value(token, column)
            fields["sport"] = _port(raw, col)
        elif token in ("-m", "--match"):
            module, col = tokens.value(token, column)
            if module in UNSUPPORTED_MATCHES:
                raise RuleParseError(f"unsupported match {module!r}", col, module)
            if module not in ("state", "conntrack", "statistic", "tcp", "udp"):
                raise RuleParseError(f"unknown match {module!r}", col, module)
            match_modules.append(module)
        elif token in ("--state", "--ctstate"):
            if not {"state", "conntrack"} & set(match_modules):
                raise RuleParseError(f"{token} needs -m state", column, token)
            raw, _ = tokens.value(token, column)
            states.extend(s.upper() for s in raw.split(",") if s)
        elif token == "--mode":
            raw, col = tokens.value(token, column)
            if "statistic" not in match_modules:
                raise RuleParseError("--mode needs -m statistic", column, token)
            if raw != "nth":
                raise RuleParseError(f"unsupported statistic mode {raw!r}", col, raw)
        elif token == "--every":
            raw, col = tokens.value(token, column)
            if not raw.isdigit() or int(raw) < 1:
                raise RuleParseError(f"bad --every {raw!r}", col, raw)
            fields["nth_every"] = int(raw)
        elif token == "--packet":
            raw, col = tokens.value(token, column)
            if not raw.isdigit():
                raise RuleParseError(f"bad --packet {raw!r}", col, raw)
            fields["nth_packet"] = int(raw)
        elif token in ("-j", "--jump"):
            raw, col = tokens.value(token, column)
            try:
                fields["target"] = Target(raw)
            except ValueError as exc:
                raise RuleParseError(f"unsupported target {raw!r}", col, raw) from exc
        elif token == "--to-destination":
            raw, col = tokens.value(token, column)
            address, _, port = raw.partition(":")
            fields["to_destination"] = _address(address, col)
            if port:
                fields["to_port"] = _port(port, col)
        else:
            raise RuleParseError(f"unsupported option {token!r}", column, token)

    end = tokens.end_column
    if "command" not in fields:
        raise RuleParseError("missing command (-A, -I or -D)", end)
    if "target" not in fields:
        raise RuleParseError("missing target (-j)", end)

    table = str(fields.get("table", "filter"))
    chain_column = int(fields.pop("_chain_column"))  # type: ignore[call-overload]
    if fields["chain"] not in TABLE_CHAINS[table]:
        raise RuleParseError(
            f"chain {fields['chain']} not supported in table {table}",
            chain_column,
            str(fields["chain"]),
        )
    target = fields["target"]
    if target is Target.DNAT and (table != "nat" or fields["chain"] != "PREROUTING"):
        raise RuleParseError("DNAT is only valid in nat PREROUTING", end, "DNAT")
    if target is Target.MASQUERADE and (table != "nat" or fields["chain"] != "POSTROUTING"):
        raise RuleParseError("MASQUERADE is only valid in nat POSTROUTING", end, "MASQUERADE")
    if target is Target.DNAT and "to_destination" not in fields:
        raise RuleParseError("DNAT needs --to-destination", end, "DNAT")
    if ("dport" in fields or "sport" in fields) and fields.get("protocol") not in ("tcp", "udp"):
        raise RuleParseError("port matches need -p tcp or -p udp", end)
    if "nth_every" in fields and "statistic" not in match_modules:
        raise RuleParseError("--every needs -m statistic", end)

    return IptablesRule(states=tuple(states), **fields)  # type: ignore[arg-type]


def _logical_lines(text: str) -> Iterator[tuple[int, str]]:
    buffer: list[str] = []
    start = 0
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not buffer:
            start = number
        if line.endswith("\\"):
            buffer.append(line[:-1])
            continue
        buffer.append(line)
        joined = " ".join(part.strip() for part in buffer if part.strip())
        buffer = []
        if joined:
            yield start, joined
    if buffer:
        joined = " ".join(part.strip() for part in buffer if part.strip())
        if joined:
            yield start, joined


def parse_rules(text: str) -> list[IptablesRule]:
    """Parse a rule file: one rule per line, ``#`` comments, ``\\`` continuations."""
    rules = []
    for number, line in _logical_lines(text):
        try:
            rules.append(parse_rule(line))
        except RuleParseError as exc:
            raise RuleParseError(exc.reason, exc.column, exc.atom, line=number) from exc
    return rules


def effective_rules(rules: list[IptablesRule]) -> list[IptablesRule]:
    """Apply -A/-I/-D in order; result is the evaluation order per chain, chains kept apart."""
    chains: dict[tuple[str, str], list[IptablesRule]] = {}
    for rule in rules:
        chain = chains.setdefault((rule.table, rule.chain), [])
        if rule.command is Command.APPEND:
            chain.append(rule)
        elif rule.command is Command.INSERT:
            index = (rule.position or 1) - 1
            chain.insert(min(index, len(chain)), rule)
        else:
            for i, existing in enumerate(chain):
                if existing.same_rule(rule):
                    del chain[i]
                    break
            else:
                logger.warning("Delete without matching rule ignored: %s", rule.text)
    ordered: list[IptablesRule] = []
    for chain_rules in chains.values():
        ordered.extend(chain_rules)
    return ordered
