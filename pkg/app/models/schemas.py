"""Pydantic schemas for pipeline programs, state dumps and the controller API."""
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import (
    AfterValidator,
    BaseModel,
    ConfigDict,
    Field,
    model_serializer,
    model_validator,
)

from app.models.enums import (
    AluOp,
    CondRequirement,
    ConditionOp,
    DirectionPattern,
    InterArrival,
    Shardability,
    StageKind,
    TableDefault,
)
from app.models.packet import (
    ADDRESS_FIELDS,
    PacketView,
    format_ip,
    parse_field,
    parse_ip,
    parse_operand,
)

FORMAT_VERSION = 1
STATE_LABEL_MAX = 0xFFFF


def _normalize_field(value: str) -> str:
    return str(parse_field(value))


def _normalize_meta(value: str) -> str:
    ref = parse_field(value)
    if not ref.is_meta:
        raise ValueError(f"{value!r} is not a metadata bit range")
    return str(ref)


def _normalize_operand(value: Union[int, str]) -> Union[int, str]:
    return parse_operand(value).to_wire()


FieldId = Annotated[str, AfterValidator(_normalize_field)]
MetaRange = Annotated[str, AfterValidator(_normalize_meta)]
Operand = Annotated[Union[int, str], AfterValidator(_normalize_operand)]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _coerce_field_value(field_id: str, raw: Any) -> tuple[int, Optional[int]]:
    """Turn a JSON value into (value, mask); addresses may be dotted or CIDR."""
    ref = parse_field(field_id)
    if isinstance(raw, str) and ref.name in ADDRESS_FIELDS:
        address, _, prefix = raw.partition("/")
        value = parse_ip(address)
        if prefix:
            bits = int(prefix)
            mask = ((1 << bits) - 1) << (32 - bits) if bits else 0
            return value & mask, mask
        return value, None
    if isinstance(raw, str):
        return int(raw, 0), None
    return int(raw), None


# --- Pipeline program ---

class FieldMatch(_Frozen):
    """Ternary (value, mask) match over one header field or metadata range."""
    field: FieldId
    value: int
    mask: int

    @model_validator(mode="before")
    @classmethod
    def _parse_value(cls, data: Any) -> Any:
        if isinstance(data, dict) and "field" in data and "value" in data:
            data = dict(data)
            value, mask = _coerce_field_value(data["field"], data["value"])
            data["value"] = value
            if data.get("mask") is None:
                data["mask"] = mask if mask is not None else parse_field(data["field"]).mask
        return data

    @model_validator(mode="after")
    def _check_width(self) -> "FieldMatch":
        full = parse_field(self.field).mask
        if not 0 <= self.mask <= full:
            raise ValueError(f"mask {self.mask:#x} wider than {self.field}")
        if not 0 <= self.value <= full:
            raise ValueError(f"value {self.value:#x} wider than {self.field}")
        return self

    @model_serializer(mode="wrap")
    def _render(self, handler: Any) -> dict[str, Any]:
        data = handler(self)
        if self.field in ADDRESS_FIELDS:
            data["value"] = format_ip(self.value)
        return data


class TernaryState(_Frozen):
    value: int = Field(ge=0, le=STATE_LABEL_MAX)
    mask: int = Field(default=STATE_LABEL_MAX, ge=0, le=STATE_LABEL_MAX)


class NextState(_Frozen):
    """The SET_STATE part of an entry: label plus timeouts in seconds."""
    state: int = Field(ge=0, le=STATE_LABEL_MAX)
    idle_timeout: Optional[float] = Field(default=None, gt=0)
    hard_timeout: Optional[float] = Field(default=None, gt=0)


class OutputAction(_Frozen):
    type: Literal["output"] = "output"
    port: int = Field(ge=0)


class DropAction(_Frozen):
    type: Literal["drop"] = "drop"


class SetFieldAction(_Frozen):
    type: Literal["set_field"] = "set_field"
    field: FieldId
    value: int

    @model_validator(mode="before")
    @classmethod
    def _parse_value(cls, data: Any) -> Any:
        if isinstance(data, dict) and "field" in data and "value" in data:
            data = dict(data)
            data["value"] = _coerce_field_value(data["field"], data["value"])[0]
        return data

    @model_validator(mode="after")
    def _check_width(self) -> "SetFieldAction":
        if not 0 <= self.value <= parse_field(self.field).mask:
            raise ValueError(f"value {self.value:#x} wider than {self.field}")
        return self

    @model_serializer(mode="wrap")
    def _render(self, handler: Any) -> dict[str, Any]:
        data = handler(self)
        if self.field in ADDRESS_FIELDS:
            data["value"] = format_ip(self.value)
        return data


class SetFieldFromAction(_Frozen):
    type: Literal["set_field_from_reg"] = "set_field_from_reg"
    field: FieldId
    source: Operand


class SetMetaAction(_Frozen):
    type: Literal["set_meta"] = "set_meta"
    bits: MetaRange
    value: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_width(self) -> "SetMetaAction":
        if self.value > parse_field(self.bits).mask:
            raise ValueError(f"value {self.value} does not fit {self.bits}")
        return self


class SetMetaFromAction(_Frozen):
    type: Literal["set_meta_from"] = "set_meta_from"
    bits: MetaRange
    source: Operand


class GotoStageAction(_Frozen):
    type: Literal["goto_stage"] = "goto_stage"
    stage: int = Field(ge=0)


Action = Annotated[
    Union[
        OutputAction,
        DropAction,
        SetFieldAction,
        SetFieldFromAction,
        SetMetaAction,
        SetMetaFromAction,
        GotoStageAction,
    ],
    Field(discriminator="type"),
]

VERDICT_ACTIONS = (OutputAction, DropAction, GotoStageAction)


class UpdateInstruction(_Frozen):
    """One ALU: ``dst = src1 op src2`` (MOV uses src1 only)."""
    dst: Operand
    op: AluOp
    src1: Operand
    src2: Optional[Operand] = None

    @model_validator(mode="after")
    def _check_shape(self) -> "UpdateInstruction":
        dst = parse_operand(self.dst)
        if dst.kind not in ("flow_reg", "global_reg") and not (
            dst.kind == "field" and dst.field is not None and dst.field.is_meta
        ):
            raise ValueError(f"update destination {self.dst!r} must be R<i>, G<i> or meta[hi:lo]")
        if self.op is not AluOp.MOV and self.src2 is None:
            raise ValueError(f"{self.op.value} needs two sources")
        return self


class Condition(_Frozen):
    op: ConditionOp
    lhs: Operand
    rhs: Operand


class EfsmEntry(_Frozen):
    """One EFSM transition: ternary match, actions, next state, ALU updates."""
    priority: int = Field(default=0, ge=0)
    label: Optional[str] = None
    match_state: Optional[TernaryState] = None
    match_conds: list[CondRequirement] = Field(default_factory=list)
    match_fields: list[FieldMatch] = Field(default_factory=list)
    actions: list[Action] = Field(default_factory=list)
    next_state: Optional[NextState] = None
    updates: list[UpdateInstruction] = Field(default_factory=list)


class ExtractorConfig(_Frozen):
    selectors: list[FieldId] = Field(default_factory=list)
    bidirectional: bool = False


class StageConfig(_Frozen):
    kind: StageKind
    name: Optional[str] = None
    lookup_extractor: Optional[ExtractorConfig] = None
    update_extractor: Optional[ExtractorConfig] = None
    conditions: list[Condition] = Field(default_factory=list)
    efsm_table: list[EfsmEntry] = Field(default_factory=list)
    table_default: TableDefault = TableDefault.DROP
    global_registers: list[int] = Field(default_factory=list)
    capacity: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _default_update_extractor(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("update_extractor") is None:
            kind = data.get("kind")
            if kind in (StageKind.STATEFUL, StageKind.STATEFUL.value):
                data = dict(data)
                data["update_extractor"] = data.get("lookup_extractor")
        return data


class EngineParams(_Frozen):
    """Machine-model limits carried by every pipeline document."""
    flow_registers: int = Field(default=4, ge=1)
    conditions: int = Field(default=8, ge=0, le=64)
    metadata_bits: Literal[32] = 32
    global_registers: int = Field(default=8, ge=1)
    alus: int = Field(default=5, ge=1)


class NatProfile(_Frozen):
    """Where a translated MASQUERADE program keeps its port stack."""
    pointer_stage: int = Field(ge=0)
    pointer_register: int = Field(ge=0)
    stack_stage: int = Field(ge=0)
    reverse_stage: int = Field(ge=0)
    forward_stage: int = Field(ge=0)
    port_low: int = Field(ge=1, le=65535)
    port_high: int = Field(ge=1, le=65535)
    public_address: str


class PipelineConfig(_Frozen):
    format_version: int = FORMAT_VERSION
    name: Optional[str] = None
    ports: int = Field(default=3, ge=1)
    port_names: dict[str, int] = Field(default_factory=dict)
    params: EngineParams = Field(default_factory=EngineParams)
    stages: list[StageConfig] = Field(default_factory=list)
    nat: Optional[NatProfile] = None


# --- State dumps ---

class ContextDump(BaseModel):
    key: dict[str, Union[int, str]]
    key_text: str
    state: int
    regs: list[int]
    idle_timeout: Optional[float] = None
    hard_timeout: Optional[float] = None
    last_seen: float
    created_at: float


class StageStatsDump(BaseModel):
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    commits: int = 0
    rejected_commits: int = 0
    evictions: int = 0
    table_default_hits: int = 0
    entry_matches: dict[int, int] = Field(default_factory=dict)


class StageStateDump(BaseModel):
    index: int
    name: Optional[str] = None
    kind: StageKind
    contexts: list[ContextDump] = Field(default_factory=list)
    globals: list[int] = Field(default_factory=list)
    stats: StageStatsDump = Field(default_factory=StageStatsDump)


class PipelineStateDump(BaseModel):
    format_version: int = FORMAT_VERSION
    stages: list[StageStateDump] = Field(default_factory=list)


# --- Controller API ---

class PacketIn(BaseModel):
    """A packet submitted to the controller; addresses may be dotted strings."""
    in_port: int = 0
    eth_src: int = 0
    eth_dst: int = 0
    eth_type: int = 0x0800
    ip_src: Union[int, str] = 0
    ip_dst: Union[int, str] = 0
    ip_proto: int = 6
    l4_src: int = 0
    l4_dst: int = 0
    ts: float = 0.0
    length: int = 64

    def to_view(self, seq: int = 0) -> PacketView:
        return PacketView(
            in_port=self.in_port,
            eth_src=self.eth_src,
            eth_dst=self.eth_dst,
            eth_type=self.eth_type,
            ip_src=parse_ip(self.ip_src),
            ip_dst=parse_ip(self.ip_dst),
            ip_proto=self.ip_proto,
            l4_src=self.l4_src,
            l4_dst=self.l4_dst,
            arrival_seq=seq,
            ts=self.ts,
            length=self.length,
        )


class DecisionOut(BaseModel):
    verdict: str
    port: Optional[int] = None
    ip_src: str
    ip_dst: str
    l4_src: int
    l4_dst: int
    metadata: int
    trace: list[dict[str, Any]] = Field(default_factory=list)


class PipelineSummary(BaseModel):
    name: Optional[str] = None
    ports: int
    stages: int
    stateful_stages: list[int]
    nat: bool
    shardability: Shardability
    ordered_stages: list[int] = Field(default_factory=list)


class ContextWrite(BaseModel):
    stage: int
    key: dict[str, Union[int, str]]
    state: int
    regs: list[int] = Field(default_factory=list)
    idle_timeout: Optional[float] = None
    hard_timeout: Optional[float] = None
    now: float = 0.0


class GlobalsWrite(BaseModel):
    stage: int
    values: dict[int, int]


class EvictRequest(BaseModel):
    now: float


class EvictResponse(BaseModel):
    evicted: int


class TranslateRequest(BaseModel):
    rules: str
    topology: dict[str, Any]
    load: bool = False


class NatSyncResponse(BaseModel):
    pushed: list[int]
    released: list[int]
    free: int
    in_use: int
    exhausted: bool


class HealthResponse(BaseModel):
    """Response model for health check."""
    status: str
    timestamp: str
    version: str
    environment: str


class ReadinessResponse(BaseModel):
    """Response model for readiness check."""
    status: str
    pipeline_loaded: bool
    timestamp: str


class ErrorResponse(BaseModel):
    """Response model for errors."""
    error: str
    detail: Optional[str] = None
    timestamp: str


# --- Harness ---

class TrafficSpec(BaseModel):
    """Synthetic workload description consumed by ``gen_traffic``."""
    flows: int = Field(default=64, ge=0)
    packets_per_flow: int = Field(default=100, ge=1)
    sizes: list[int] = Field(default_factory=lambda: [64])
    client_subnet: str = "10.0.0.0/24"
    server_subnet: str = "8.0.0.0/24"
    client_ports: tuple[int, int] = (1024, 65535)
    server_ports: list[int] = Field(default_factory=lambda: [80])
    protocol: int = 6
    client_port: int = Field(default=2, ge=0)
    server_port: int = Field(default=1, ge=0)
    inter_arrival: InterArrival = InterArrival.BACK_TO_BACK
    rate_pps: float = Field(default=1_000_000.0, gt=0)
    pattern: DirectionPattern = DirectionPattern.UNIDIRECTIONAL
    start: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "TrafficSpec":
        if not self.sizes or any(s < 64 for s in self.sizes):
            raise ValueError("packet sizes must be at least 64 bytes")
        low, high = self.client_ports
        if not 0 < low <= high <= 65535:
            raise ValueError(f"bad client port range {low}-{high}")
        if not self.server_ports:
            raise ValueError("server_ports must not be empty")
        return self


class WorkerRate(BaseModel):
    worker: int
    packets: int
    pps: float


class RunReport(BaseModel):
    format_version: int = FORMAT_VERSION
    workers: int
    packets: int
    elapsed: float
    pps: float
    per_worker: list[WorkerRate] = Field(default_factory=list)
    verdicts: dict[str, int] = Field(default_factory=dict)
    verdict_digest: str
    flow_digest: str
    state_digest: str
    flows: int
    shardability: Shardability
    ordered_stages: list[int] = Field(default_factory=list)
    stages: list[StageStatsDump] = Field(default_factory=list)
    oracle: Optional[bool] = None


class BenchPoint(BaseModel):
    kind: str
    stages: int
    workers: int
    packet_size: int
    packets: int
    elapsed: float
    pps: float
    backend: str


class BenchReport(BaseModel):
    format_version: int = FORMAT_VERSION
    points: list[BenchPoint] = Field(default_factory=list)

    def table(self) -> str:
        """Tab-separated rows, one per measurement."""
        header = "kind\tstages\tworkers\tsize\tpackets\tpps\tbackend"
        rows = [
            "\t".join(
                [p.kind, str(p.stages), str(p.workers), str(p.packet_size), str(p.packets),
                 f"{p.pps:.0f}", p.backend]
            )
            for p in self.points
        ]
        return "\n".join([header, *rows])
