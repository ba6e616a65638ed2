from enum import Enum


class StageKind(str, Enum):
    STATEFUL = "stateful"
    STATELESS = "stateless"


class ConditionOp(str, Enum):
    GT = "gt"
    LT = "lt"
    EQ = "eq"


class AluOp(str, Enum):
    ADD = "add"
    SUB = "sub"
    AND = "and"
    OR = "or"
    XOR = "xor"
    SHL = "shl"
    SHR = "shr"
    MOV = "mov"


class CondRequirement(str, Enum):
    MUST_TRUE = "true"
    MUST_FALSE = "false"
    DONT_CARE = "*"


class TableDefault(str, Enum):
    DROP = "drop"
    GOTO_NEXT = "goto_next"


class Verdict(str, Enum):
    FORWARD = "forward"
    DROP = "drop"
    CONTINUE = "continue"


class Shardability(str, Enum):
    FULLY_SHARDABLE = "fully_shardable"
    PARTIALLY_SHARDABLE = "partially_shardable"


class DirectionPattern(str, Enum):
    UNIDIRECTIONAL = "unidirectional"
    REQUEST_REPLY = "request_reply"
    HANDSHAKE_BURST = "handshake_burst"


class InterArrival(str, Enum):
    BACK_TO_BACK = "back_to_back"
    FIXED_RATE = "fixed_rate"
