"""Translate iptables rule sets into OPP pipeline programs.

Stage roles, emitted only when a rule needs them:

    0  conntrack machine, LB new-flow counter G0, NAT stack pointer G1
    1  NAT port stack (keyed on metadata, labels are port numbers)
    2  NAT reverse translation (cross-flow update)
    3  LB server assignment / NAT source rewrite
    4  stateless forwarding, filter verdicts, static rewrites
"""
import logging
from typing import Any, Optional, Sequence

import netaddr

from app.config import settings
from app.core.exceptions import TranslationError
from app.iptables.rules import IptablesRule, Target, effective_rules
from app.iptables.topology import Interface, Topology
from app.models.enums import AluOp, CondRequirement, ConditionOp, StageKind
from app.models.packet import parse_ip
from app.models.schemas import (
    Condition,
    DropAction,
    EfsmEntry,
    ExtractorConfig,
    FieldMatch,
    GotoStageAction,
    NatProfile,
    NextState,
    OutputAction,
    PipelineConfig,
    SetFieldAction,
    SetFieldFromAction,
    SetMetaAction,
    SetMetaFromAction,
    StageConfig,
    TernaryState,
    UpdateInstruction,
)
from app.utils.validators import validate_pipeline

logger = logging.getLogger(__name__)

ROLE_COUNTERS = 0
ROLE_STACK = 1
ROLE_REVERSE = 2
ROLE_FORWARD = 3
ROLE_STATELESS = 4

STATE_HALF_OPEN = 12
STATE_ESTABLISHED = 2
STATE_LB_FIRST = 1
STATE_LB_ASSIGNED = 1
STATE_NAT_FLOW = 1
STATE_NAT_BOUND = 1
STATE_NAT_FORWARD = 2

CONNTRACK_FLAG = "meta[3:0]"
LB_COUNTER_BITS = "meta[3:0]"
NAT_PORT_BITS = "meta[15:0]"
NAT_NEW_FLAG = "meta[16:16]"
LB_COUNTER_REG = "G0"
NAT_POINTER_INDEX = 1

BIDIR_4_TUPLE = ExtractorConfig(
    selectors=["ip_src", "l4_src", "ip_dst", "l4_dst"], bidirectional=True
)
DIRECTED_4_TUPLE = ExtractorConfig(selectors=["ip_src", "l4_src", "ip_dst", "l4_dst"])
ESTABLISHED_STATES = {"ESTABLISHED", "RELATED"}


def _match(field: str, value: Any, mask: Optional[int] = None) -> FieldMatch:
    return FieldMatch(field=field, value=value, mask=mask)


def _subnet(field: str, iface: Interface) -> list[FieldMatch]:
    return [_match(field, iface.subnet)] if iface.subnet else []


def _state(value: int) -> TernaryState:
    return TernaryState(value=value)


def _update(dst: str, op: AluOp, src1: Any, src2: Any = None) -> UpdateInstruction:
    return UpdateInstruction(dst=dst, op=op, src1=src1, src2=src2)


def conntrack_template(
    idle_timeout: Optional[float] = None,
    initiator_port: int = 2,
    responder_port: int = 1,
    initiator_subnet: Optional[str] = "10.0.0.0/24",
    responder_subnet: Optional[str] = "8.0.0.0/24",
    next_stage: int = ROLE_STATELESS,
) -> StageConfig:
    """Protocol-agnostic connection tracking: 0 -> 12 (half open) -> 2 (established).

    Established packets carry ``meta[3:0] = 1`` to the next stage. Every
    transition re-arms the idle timeout.
    """
    timeout = idle_timeout or settings.conntrack_idle_timeout
    goto = GotoStageAction(stage=next_stage)
    flag = SetMetaAction(bits=CONNTRACK_FLAG, value=1)
    to_responder = [_match("ip_dst", responder_subnet)] if responder_subnet else []
    to_initiator = [_match("ip_dst", initiator_subnet)] if initiator_subnet else []

    def entry(label: str, **kwargs: Any) -> EfsmEntry:
        return EfsmEntry(label=f"conntrack:{label}", **kwargs)

    entries = [
        entry(
            "new",
            match_state=_state(0),
            match_fields=[_match("in_port", initiator_port), *to_responder],
            actions=[goto],
            next_state=NextState(state=STATE_HALF_OPEN, idle_timeout=timeout),
        ),
        entry(
            "unsolicited",
            match_state=_state(0),
            match_fields=[_match("in_port", responder_port), *to_initiator],
            actions=[goto],
        ),
        entry(
            "half-open",
            match_state=_state(STATE_HALF_OPEN),
            match_fields=[_match("in_port", initiator_port)],
            actions=[goto],
            next_state=NextState(state=STATE_HALF_OPEN, idle_timeout=timeout),
        ),
        entry(
            "reply",
            match_state=_state(STATE_HALF_OPEN),
            match_fields=[_match("in_port", responder_port)],
            actions=[flag, goto],
            next_state=NextState(state=STATE_ESTABLISHED, idle_timeout=timeout),
        ),
        entry(
            "established-out",
            match_state=_state(STATE_ESTABLISHED),
            match_fields=[_match("in_port", initiator_port)],
            actions=[flag, goto],
            next_state=NextState(state=STATE_ESTABLISHED, idle_timeout=timeout),
        ),
        entry(
            "established-in",
            match_state=_state(STATE_ESTABLISHED),
            match_fields=[_match("in_port", responder_port)],
            actions=[flag, goto],
            next_state=NextState(state=STATE_ESTABLISHED, idle_timeout=timeout),
        ),
        entry(
            "invalid",
            match_fields=[_match("in_port", responder_port), *to_initiator],
            actions=[DropAction()],
        ),
    ]
    return StageConfig(
        kind=StageKind.STATEFUL,
        name="conntrack",
        lookup_extractor=BIDIR_4_TUPLE,
        update_extractor=BIDIR_4_TUPLE,
        efsm_table=entries,
    )


class _Translation:
    """Working state of one ``translate`` call."""

    def __init__(
        self,
        rules: Sequence[IptablesRule],
        topo: Topology,
        idle_timeout: Optional[float],
        port_range: Optional[tuple[int, int]],
    ):
        self.topo = topo
        self.timeout = idle_timeout or settings.conntrack_idle_timeout
        self.port_range = port_range or settings.nat_port_range_tuple
        ordered = effective_rules(list(rules))
        self.filters = [r for r in ordered if r.table == "filter"]
        self.stateful_filters = [r for r in self.filters if r.states]
        self.dnat = [r for r in ordered if r.target is Target.DNAT]
        self.masquerade = [r for r in ordered if r.target is Target.MASQUERADE]

        roles = {ROLE_STATELESS}
        if self.stateful_filters or self.dnat or self.masquerade:
            roles.add(ROLE_COUNTERS)
        if self.masquerade:
            roles |= {ROLE_STACK, ROLE_REVERSE, ROLE_FORWARD}
        if self.dnat:
            roles.add(ROLE_FORWARD)
        self.index = {role: i for i, role in enumerate(sorted(roles))}

    def goto(self, role: int) -> GotoStageAction:
        return GotoStageAction(stage=self.index[role])

    def next_state(self, state: int) -> NextState:
        return NextState(state=state, idle_timeout=self.timeout)

    # --- conntrack ---

    def conntrack_entries(self) -> list[EfsmEntry]:
        if not self.stateful_filters:
            return []
        pairs = set()
        for rule in self.stateful_filters:
            unknown = set(rule.states) - ESTABLISHED_STATES
            if unknown:
                raise TranslationError(
                    f"state {sorted(unknown)} not supported by the conntrack template: {rule.text}"
                )
            if rule.in_iface is None or rule.out_iface is None:
                raise TranslationError(f"--state rules need -i and -o: {rule.text}")
            pairs.add((rule.out_iface, rule.in_iface))
        if len(pairs) > 1:
            raise TranslationError("conntrack template supports one interface pair")
        initiator_name, responder_name = pairs.pop()
        initiator = self.topo.interface(initiator_name)
        responder = self.topo.interface(responder_name)
        stage = conntrack_template(
            self.timeout,
            initiator.port,
            responder.port,
            initiator.subnet,
            responder.subnet,
            self.index[ROLE_STATELESS],
        )
        return list(stage.efsm_table)

    # --- load balancer ---

    def lb_servers(self) -> list[tuple[IptablesRule, int, int]]:
        if len(self.dnat) > 2:
            raise TranslationError("round-robin DNAT supports at most two servers")
        first = self.dnat[0]
        servers = []
        for rule in self.dnat:
            if rule.nth_every is None:
                raise TranslationError(f"DNAT without -m statistic --mode nth: {rule.text}")
            if rule.nth_every > 2:
                raise TranslationError(f"--every {rule.nth_every} needs more than a mod-2 mask")
            if rule.nth_packet is not None and rule.nth_packet >= rule.nth_every:
                raise TranslationError(f"--packet must be below --every: {rule.text}")
            same = (rule.in_iface, rule.destination, rule.protocol, rule.dport)
            if same != (first.in_iface, first.destination, first.protocol, first.dport):
                raise TranslationError("DNAT rules must share the virtual service match")
            port = rule.to_port or rule.dport
            if port is None:
                raise TranslationError(f"DNAT target needs a port: {rule.text}")
            servers.append((rule, parse_ip(rule.to_destination or ""), port))
        if first.in_iface is None or first.destination is None or "/" in first.destination:
            raise TranslationError("DNAT rules need -i and a single -d address")
        return servers

    def lb_counter_entries(self, servers: list[tuple[IptablesRule, int, int]]) -> list[EfsmEntry]:
        rule = servers[0][0]
        in_port = self.topo.port_of(rule.in_iface or "")
        vip: list[FieldMatch] = [_match("in_port", in_port)]
        if rule.protocol_number is not None:
            vip.append(_match("ip_proto", rule.protocol_number))
        vip.append(_match("ip_dst", rule.destination))
        if rule.dport is not None:
            vip.append(_match("l4_dst", rule.dport))
        forward = self.goto(ROLE_FORWARD)
        entries = [
            EfsmEntry(
                label="lb:new-flow",
                match_state=_state(0),
                match_fields=vip,
                actions=[forward],
                next_state=self.next_state(STATE_LB_FIRST),
                updates=[
                    _update(LB_COUNTER_BITS, AluOp.MOV, LB_COUNTER_REG),
                    _update(LB_COUNTER_REG, AluOp.ADD, LB_COUNTER_REG, 1),
                ],
            ),
            EfsmEntry(
                label="lb:known-flow",
                match_state=_state(STATE_LB_FIRST),
                match_fields=[_match("in_port", in_port)],
                actions=[forward],
                next_state=self.next_state(STATE_LB_FIRST),
            ),
        ]
        entries.extend(self.lb_reply_entries(servers))
        return entries

    def lb_reply_entries(self, servers: list[tuple[IptablesRule, int, int]]) -> list[EfsmEntry]:
        """Server replies skip to the stateless stage without touching state."""
        proto = servers[0][0].protocol_number
        groups: list[tuple[int, int, int]] = []
        for _, address, port in servers:
            for i, (value, mask, gport) in enumerate(groups):
                if gport == port and (value ^ address) == 1:
                    groups[i] = (value & ~1, 0xFFFFFFFE, port)
                    break
            else:
                groups.append((address, 0xFFFFFFFF, port))
        entries = []
        for value, mask, port in groups:
            iface = self._iface_for(value)
            fields = [_match("in_port", iface.port), _match("ip_src", value, mask)]
            if proto is not None:
                fields.append(_match("ip_proto", proto))
            fields.append(_match("l4_src", port))
            entries.append(
                EfsmEntry(
                    label="lb:server-reply",
                    match_fields=fields,
                    actions=[self.goto(ROLE_STATELESS)],
                )
            )
        return entries

    def lb_assign_entries(self, servers: list[tuple[IptablesRule, int, int]]) -> list[EfsmEntry]:
        """Counter c picks rule ``--every N`` when ``c mod N == packet`` (default N-1)."""
        rule = servers[0][0]
        in_port = self.topo.port_of(rule.in_iface or "")
        stateless = self.goto(ROLE_STATELESS)
        entries = []
        taken: Optional[int] = None
        for server_rule, address, port in servers:
            every = server_rule.nth_every or 1
            if every == 2:
                value = server_rule.nth_packet if server_rule.nth_packet is not None else 1
                mask = 1
                taken = value
            elif taken is not None:
                value, mask = 1 - taken, 1
            else:
                value, mask = 0, 0
            entries.append(
                EfsmEntry(
                    label=f"lb:assign:{server_rule.to_destination}:{port}",
                    match_state=_state(0),
                    match_fields=[
                        _match("in_port", in_port),
                        _match(LB_COUNTER_BITS, value, mask),
                    ],
                    actions=[
                        SetFieldAction(field="ip_dst", value=address),
                        SetFieldAction(field="l4_dst", value=port),
                        stateless,
                    ],
                    next_state=self.next_state(STATE_LB_ASSIGNED),
                    updates=[
                        _update("R0", AluOp.MOV, address),
                        _update("R1", AluOp.MOV, port),
                    ],
                )
            )
            if mask == 0:
                break
        entries.append(
            EfsmEntry(
                label="lb:sticky",
                match_state=_state(STATE_LB_ASSIGNED),
                match_fields=[_match("in_port", in_port)],
                actions=[
                    SetFieldFromAction(field="ip_dst", source="R0"),
                    SetFieldFromAction(field="l4_dst", source="R1"),
                    stateless,
                ],
            )
        )
        return entries

    def _iface_for(self, address: int) -> Interface:
        for iface in self.topo.interfaces:
            if iface.subnet and netaddr.IPAddress(address) in netaddr.IPNetwork(iface.subnet):
                return iface
        return self.topo.interface(self.topo.inside)

    # --- dynamic NAT ---

    def nat_interfaces(self) -> tuple[Interface, Interface, str]:
        if len(self.masquerade) > 1:
            raise TranslationError("only one MASQUERADE rule is supported")
        rule = self.masquerade[0]
        inside = self.topo.interface(rule.in_iface or self.topo.inside)
        uplink = self.topo.interface(rule.out_iface or self.topo.uplink)
        public = uplink.address or self.topo.public_address
        return inside, uplink, public

    def nat_pointer_entries(self, cond_index: int) -> list[EfsmEntry]:
        inside, uplink, public = self.nat_interfaces()
        conds = [CondRequirement.DONT_CARE] * cond_index + [CondRequirement.MUST_FALSE]
        pointer = f"G{NAT_POINTER_INDEX}"
        return [
            EfsmEntry(
                label="nat:pop",
                match_state=_state(0),
                match_conds=conds,
                match_fields=[_match("in_port", inside.port)],
                actions=[
                    SetMetaAction(bits=NAT_NEW_FLAG, value=1),
                    self.goto(ROLE_STACK),
                ],
                next_state=self.next_state(STATE_NAT_FLOW),
                updates=[
                    _update(NAT_PORT_BITS, AluOp.SUB, pointer, 1),
                    _update(pointer, AluOp.SUB, pointer, 1),
                ],
            ),
            EfsmEntry(
                label="nat:known-flow",
                match_state=_state(STATE_NAT_FLOW),
                match_fields=[_match("in_port", inside.port)],
                actions=[self.goto(ROLE_FORWARD)],
                next_state=self.next_state(STATE_NAT_FLOW),
            ),
            EfsmEntry(
                label="nat:reply",
                match_state=_state(0),
                match_fields=[_match("in_port", uplink.port), _match("ip_dst", public)],
                actions=[self.goto(ROLE_REVERSE)],
            ),
        ]

    def nat_stack_stage(self) -> StageConfig:
        slot = ExtractorConfig(selectors=[NAT_PORT_BITS])
        return StageConfig(
            kind=StageKind.STATEFUL,
            name="nat-stack",
            lookup_extractor=slot,
            update_extractor=slot,
            efsm_table=[
                EfsmEntry(label="nat:empty-slot", match_state=_state(0), actions=[DropAction()]),
                EfsmEntry(
                    label="nat:stack-read",
                    actions=[
                        SetMetaFromAction(bits=NAT_PORT_BITS, source="state"),
                        self.goto(ROLE_REVERSE),
                    ],
                ),
            ],
        )

    def nat_reverse_stage(self) -> StageConfig:
        inside, uplink, _ = self.nat_interfaces()
        return StageConfig(
            kind=StageKind.STATEFUL,
            name="nat-reverse",
            lookup_extractor=ExtractorConfig(selectors=["ip_src", "l4_src", "l4_dst"]),
            update_extractor=ExtractorConfig(selectors=["ip_dst", "l4_dst", NAT_PORT_BITS]),
            efsm_table=[
                EfsmEntry(
                    label="nat:bind",
                    match_fields=[_match("in_port", inside.port), _match(NAT_NEW_FLAG, 1)],
                    actions=[self.goto(ROLE_FORWARD)],
                    next_state=self.next_state(STATE_NAT_BOUND),
                    updates=[
                        _update("R0", AluOp.MOV, "ip_src"),
                        _update("R1", AluOp.MOV, "l4_src"),
                        _update("R2", AluOp.MOV, NAT_PORT_BITS),
                    ],
                ),
                EfsmEntry(
                    label="nat:translate-reply",
                    match_state=_state(STATE_NAT_BOUND),
                    match_fields=[_match("in_port", uplink.port)],
                    actions=[
                        SetFieldFromAction(field="ip_dst", source="R0"),
                        SetFieldFromAction(field="l4_dst", source="R1"),
                        self.goto(ROLE_STATELESS),
                    ],
                ),
            ],
        )

    def nat_forward_entries(self) -> list[EfsmEntry]:
        inside, _, public = self.nat_interfaces()
        stateless = self.goto(ROLE_STATELESS)
        return [
            EfsmEntry(
                label="nat:assign",
                match_fields=[_match("in_port", inside.port), _match(NAT_NEW_FLAG, 1)],
                actions=[
                    SetFieldAction(field="ip_src", value=public),
                    SetFieldFromAction(field="l4_src", source=NAT_PORT_BITS),
                    stateless,
                ],
                next_state=self.next_state(STATE_NAT_FORWARD),
                updates=[_update("R0", AluOp.MOV, NAT_PORT_BITS)],
            ),
            EfsmEntry(
                label="nat:sticky",
                match_state=_state(STATE_NAT_FORWARD),
                match_fields=[_match("in_port", inside.port)],
                actions=[
                    SetFieldAction(field="ip_src", value=public),
                    SetFieldFromAction(field="l4_src", source="R0"),
                    stateless,
                ],
            ),
        ]

    # --- stateless stage ---

    def filter_entry(self, number: int, rule: IptablesRule) -> EfsmEntry:
        fields: list[FieldMatch] = []
        if rule.in_iface is not None:
            fields.append(_match("in_port", self.topo.port_of(rule.in_iface)))
        out_iface = self.topo.interface(rule.out_iface) if rule.out_iface else None
        if rule.source is not None:
            fields.append(_match("ip_src", rule.source))
        if rule.destination is not None:
            fields.append(_match("ip_dst", rule.destination))
        elif out_iface is not None:
            fields.extend(_subnet("ip_dst", out_iface))
        if rule.protocol_number is not None:
            fields.append(_match("ip_proto", rule.protocol_number))
        if rule.sport is not None:
            fields.append(_match("l4_src", rule.sport))
        if rule.dport is not None:
            fields.append(_match("l4_dst", rule.dport))
        if rule.states:
            fields.append(_match(CONNTRACK_FLAG, 1))

        if rule.target is Target.DROP:
            action: Any = DropAction()
        else:
            if out_iface is None and rule.destination is not None:
                out_iface = self._iface_for(parse_ip(rule.destination.split("/")[0]))
            if out_iface is None:
                raise TranslationError(f"ACCEPT needs -o or -d to pick a port: {rule.text}")
            action = OutputAction(port=out_iface.port)
        return EfsmEntry(label=f"filter:{number}", match_fields=fields, actions=[action])

    def stateless_stage(self) -> StageConfig:
        uplink = self.topo.interface(self.topo.uplink)
        inside = self.topo.interface(self.topo.inside)
        entries = [self.filter_entry(n, rule) for n, rule in enumerate(self.filters, start=1)]
        entries.append(
            EfsmEntry(
                label="route:uplink-to-inside",
                match_fields=[_match("in_port", uplink.port), *_subnet("ip_dst", inside)],
                actions=[OutputAction(port=inside.port)],
            )
        )
        outbound: list[Any] = []
        if self.dnat or self.masquerade:
            outbound.append(SetFieldAction(field="ip_src", value=self.topo.public_address))
        outbound.append(OutputAction(port=uplink.port))
        entries.append(
            EfsmEntry(
                label="route:inside-to-uplink",
                match_fields=[_match("in_port", inside.port)],
                actions=outbound,
            )
        )
        return StageConfig(kind=StageKind.STATELESS, name="forwarding", efsm_table=entries)

    # --- assembly ---

    def build(self, name: Optional[str]) -> PipelineConfig:
        stages: dict[int, StageConfig] = {}
        servers = self.lb_servers() if self.dnat else []

        if ROLE_COUNTERS in self.index:
            entries = self.conntrack_entries()
            conditions: list[Condition] = []
            if servers:
                entries += self.lb_counter_entries(servers)
            if self.masquerade:
                conditions.append(
                    Condition(op=ConditionOp.EQ, lhs=f"G{NAT_POINTER_INDEX}", rhs=0)
                )
                entries += self.nat_pointer_entries(len(conditions) - 1)
            stages[ROLE_COUNTERS] = StageConfig(
                kind=StageKind.STATEFUL,
                name="conntrack" if self.stateful_filters else "counters",
                lookup_extractor=BIDIR_4_TUPLE,
                update_extractor=BIDIR_4_TUPLE,
                conditions=conditions,
                efsm_table=[e.model_copy(update={"priority": i}) for i, e in enumerate(entries)],
            )
        if self.masquerade:
            stages[ROLE_STACK] = self.nat_stack_stage()
            stages[ROLE_REVERSE] = self.nat_reverse_stage()
        if ROLE_FORWARD in self.index:
            entries = []
            if self.masquerade:
                entries += self.nat_forward_entries()
            if servers:
                entries += self.lb_assign_entries(servers)
            stages[ROLE_FORWARD] = StageConfig(
                kind=StageKind.STATEFUL,
                name="forward-nat",
                lookup_extractor=DIRECTED_4_TUPLE,
                update_extractor=DIRECTED_4_TUPLE,
                efsm_table=[e.model_copy(update={"priority": i}) for i, e in enumerate(entries)],
            )
        stateless = self.stateless_stage()
        stages[ROLE_STATELESS] = stateless.model_copy(
            update={
                "efsm_table": [
                    e.model_copy(update={"priority": i}) for i, e in enumerate(stateless.efsm_table)
                ]
            }
        )

        nat = None
        if self.masquerade:
            _, _, public = self.nat_interfaces()
            low, high = self.port_range
            nat = NatProfile(
                pointer_stage=self.index[ROLE_COUNTERS],
                pointer_register=NAT_POINTER_INDEX,
                stack_stage=self.index[ROLE_STACK],
                reverse_stage=self.index[ROLE_REVERSE],
                forward_stage=self.index[ROLE_FORWARD],
                port_low=low,
                port_high=high,
                public_address=public,
            )

        config = PipelineConfig(
            name=name,
            ports=self.topo.ports,
            port_names=self.topo.port_names,
            stages=[stages[role] for role in sorted(self.index)],
            nat=nat,
        )
        validate_pipeline(config)
        return config


def translate(
    rules: Sequence[IptablesRule],
    topo: Topology,
    idle_timeout: Optional[float] = None,
    port_range: Optional[tuple[int, int]] = None,
    name: Optional[str] = "iptables",
) -> PipelineConfig:
    """Map a parsed rule list onto stages; rule order becomes entry priority."""
    translation = _Translation(rules, topo, idle_timeout, port_range)
    config = translation.build(name)
    logger.info(
        "Translated %d rules into %d stages (%d stateful)",
        len(rules), len(config.stages),
        sum(1 for s in config.stages if s.kind is StageKind.STATEFUL),
    )
    return config
