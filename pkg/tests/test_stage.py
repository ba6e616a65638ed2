import itertools
import random

import pytest

from app.core.context_table import FlowContext
from app.core.stage import (
    ConditionVector,
    Stage,
    evaluate_conditions,
    execute_updates,
    match_entry,
)
from app.models.enums import AluOp, CondRequirement, ConditionOp, StageKind, TableDefault, Verdict
from app.models.packet import MASK32
from app.models.schemas import (
    Condition,
    EfsmEntry,
    EngineParams,
    ExtractorConfig,
    FieldMatch,
    NextState,
    OutputAction,
    SetFieldAction,
    StageConfig,
    TernaryState,
    UpdateInstruction,
)
from tests.conftest import make_packet

PARAMS = EngineParams()


def stage_of(config: StageConfig, capacity: int = 64) -> Stage:
    return Stage(config, 0, PARAMS, capacity)


class TestConditions:
    def test_field_against_register(self):
        pkt = make_packet("10.0.0.2:123", "8.0.0.5:80", in_port=2)
        ctx = FlowContext.default(4)
        conds = [Condition(op=ConditionOp.GT, lhs="l4_dst", rhs="R0")]
        vector = evaluate_conditions(pkt, ctx, [0] * 8, conds)
        assert vector[0] is True
        assert vector.as_tuple() == (True,) + (False,) * 7

    def test_global_equality(self):
        pkt = make_packet("10.0.0.2:1", "8.0.0.5:2", in_port=2)
        conds = [Condition(op=ConditionOp.EQ, lhs="G0", rhs=0)]
        assert evaluate_conditions(pkt, FlowContext.default(4), [0] * 8, conds)[0]
        assert not evaluate_conditions(pkt, FlowContext.default(4), [1] + [0] * 7, conds)[0]

    def test_random_conditions_match_interpreter(self):
        rng = random.Random(11)
        operands = ["l4_src", "l4_dst", "ip_src", "R0", "R1", "G0", "G2", "state", "meta[7:0]"]
        for _ in range(300):
            pkt = make_packet("0.0.0.0", "0.0.0.0", in_port=rng.randrange(3))
            pkt.ip_src = rng.getrandbits(32)
            pkt.l4_src = rng.getrandbits(16)
            pkt.l4_dst = rng.getrandbits(16)
            pkt.metadata = rng.getrandbits(32)
            regs = [rng.getrandbits(32) for _ in range(4)]
            ctx = FlowContext(state=rng.getrandbits(16), regs=regs)
            globals_ = [rng.getrandbits(32) for _ in range(8)]
            env = {
                "l4_src": pkt.l4_src,
                "l4_dst": pkt.l4_dst,
                "ip_src": pkt.ip_src,
                "R0": ctx.regs[0],
                "R1": ctx.regs[1],
                "G0": globals_[0],
                "G2": globals_[2],
                "state": ctx.state,
                "meta[7:0]": pkt.metadata & 0xFF,
            }
            conds = []
            expected = []
            for _ in range(rng.randrange(1, 9)):
                op = rng.choice(list(ConditionOp))
                lhs = rng.choice(operands)
                rhs = rng.choice(operands + [rng.getrandbits(16)])
                conds.append(Condition(op=op, lhs=lhs, rhs=rhs))
                a = env[lhs]
                b = rhs if isinstance(rhs, int) else env[rhs]
                expected.append({"gt": a > b, "lt": a < b, "eq": a == b}[op.value])
            vector = evaluate_conditions(pkt, ctx, globals_, conds)
            assert vector.as_tuple() == tuple(expected) + (False,) * (8 - len(expected))


def _ternary_oracle(entries, state, bits, pkt):
    for entry in sorted(entries, key=lambda e: e.priority):
        if entry.match_state is not None:
            mask = entry.match_state.mask
            if state & mask != entry.match_state.value & mask:
                continue
        ok = True
        for i, req in enumerate(entry.match_conds):
            if req is CondRequirement.MUST_TRUE and not (bits >> i) & 1:
                ok = False
            if req is CondRequirement.MUST_FALSE and (bits >> i) & 1:
                ok = False
        for m in entry.match_fields:
            if getattr(pkt, m.field) & m.mask != m.value & m.mask:
                ok = False
        if ok:
            return entry
    return None


class TestMatch:
    def test_first_lan_packet_hits_new_connection_entry(self, firewall_config, packet):
        table = firewall_config.stages[0].efsm_table
        pkt = packet("10.0.0.2:123", "8.0.0.5:678", in_port=2)
        entry = match_entry(table, 0, ConditionVector(0, 8), pkt)
        assert entry is not None
        assert entry.label == "conntrack:new"
        assert entry.next_state.state == 12

    def test_metadata_mod_two(self):
        entries = [
            EfsmEntry(label="even", match_fields=[FieldMatch(field="meta[3:0]", value=0, mask=1)]),
            EfsmEntry(label="odd", match_fields=[FieldMatch(field="meta[3:0]", value=1, mask=1)]),
        ]
        pkt = make_packet("2.0.0.7:678", "1.0.0.1:80", in_port=0)
        for counter, label in [(0, "even"), (1, "odd"), (6, "even"), (9, "odd")]:
            pkt.metadata = counter
            assert match_entry(entries, 0, ConditionVector(0, 8), pkt).label == label

    def test_equal_priorities_keep_insertion_order(self):
        entries = [EfsmEntry(label="a"), EfsmEntry(label="b")]
        pkt = make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=0)
        assert match_entry(entries, 0, ConditionVector(0, 8), pkt).label == "a"
        entries = [EfsmEntry(label="late", priority=5), EfsmEntry(label="early", priority=1)]
        assert match_entry(entries, 0, ConditionVector(0, 8), pkt).label == "early"

    def test_exhaustive_against_ternary_oracle(self):
        rng = random.Random(5)
        reqs = list(CondRequirement)
        for _ in range(200):
            entries = []
            for i in range(rng.randrange(1, 9)):
                match_state = None
                if rng.random() < 0.6:
                    match_state = TernaryState(value=rng.randrange(4), mask=rng.choice([0, 1, 3]))
                fields = []
                if rng.random() < 0.5:
                    fields.append(
                        FieldMatch(field="l4_dst", value=rng.choice([80, 443]), mask=0xFFFF)
                    )
                entries.append(
                    EfsmEntry(
                        label=str(i),
                        priority=rng.randrange(4),
                        match_state=match_state,
                        match_conds=[rng.choice(reqs) for _ in range(3)],
                        match_fields=fields,
                    )
                )
            for state, bits, port in itertools.product(range(4), range(8), (80, 443)):
                pkt = make_packet("1.1.1.1:1", f"2.2.2.2:{port}", in_port=0)
                got = match_entry(entries, state, ConditionVector(bits, 8), pkt)
                assert got is _ternary_oracle(entries, state, bits, pkt)


class TestUpdates:
    def test_counter_is_read_before_increment(self):
        entry = EfsmEntry(
            updates=[
                UpdateInstruction(dst="meta[3:0]", op=AluOp.MOV, src1="G0"),
                UpdateInstruction(dst="G0", op=AluOp.ADD, src1="G0", src2=1),
            ]
        )
        pkt = make_packet("2.0.0.7:678", "1.0.0.1:80", in_port=0)
        result = execute_updates(entry, pkt, FlowContext.default(4), [0] * 8)
        assert result.metadata & 0xF == 0
        assert result.globals[0] == 1

    def test_add_zero_is_identity(self):
        entry = EfsmEntry(updates=[UpdateInstruction(dst="R0", op=AluOp.ADD, src1="R0", src2=0)])
        ctx = FlowContext(state=1, regs=[42, 0, 0, 0])
        pkt = make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=0)
        assert execute_updates(entry, pkt, ctx, [0] * 8).regs == (42, 0, 0, 0)

    def test_swap_through_parallel_read(self):
        entry = EfsmEntry(
            updates=[
                UpdateInstruction(dst="R0", op=AluOp.MOV, src1="R1"),
                UpdateInstruction(dst="R1", op=AluOp.MOV, src1="R0"),
            ]
        )
        ctx = FlowContext(state=1, regs=[1, 2, 0, 0])
        pkt = make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=0)
        assert execute_updates(entry, pkt, ctx, [0] * 8).regs[:2] == (2, 1)

    @pytest.mark.parametrize(
        "op,a,b,expected",
        [
            (AluOp.ADD, MASK32, 2, 1),
            (AluOp.SUB, 0, 1, MASK32),
            (AluOp.SHL, 1, 33, 2),
            (AluOp.SHR, 8, 35, 1),
            (AluOp.XOR, 0b1100, 0b1010, 0b0110),
        ],
    )
    def test_alu_wraps_at_32_bits(self, op, a, b, expected):
        entry = EfsmEntry(updates=[UpdateInstruction(dst="R0", op=op, src1="R0", src2=b)])
        ctx = FlowContext(state=0, regs=[a, 0, 0, 0])
        pkt = make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=0)
        assert execute_updates(entry, pkt, ctx, [0] * 8).regs[0] == expected

    def test_random_lists_follow_snapshot_semantics(self):
        rng = random.Random(9)
        registers = ["R0", "R1", "R2", "R3", "G0", "G1", "G2", "G3"]
        functions = {
            AluOp.ADD: lambda a, b: (a + b) & MASK32,
            AluOp.SUB: lambda a, b: (a - b) & MASK32,
            AluOp.AND: lambda a, b: a & b,
            AluOp.OR: lambda a, b: a | b,
            AluOp.XOR: lambda a, b: a ^ b,
            AluOp.SHL: lambda a, b: (a << (b % 32)) & MASK32,
            AluOp.SHR: lambda a, b: a >> (b % 32),
            AluOp.MOV: lambda a, b: a,
        }
        pkt = make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=0)
        for _ in range(1000):
            ctx = FlowContext(state=0, regs=[rng.getrandbits(32) for _ in range(4)])
            globals_ = [rng.getrandbits(32) for _ in range(8)]
            snapshot = {f"R{i}": v for i, v in enumerate(ctx.regs)}
            snapshot.update({f"G{i}": v for i, v in enumerate(globals_)})
            updates = []
            writes = []
            for _ in range(rng.randrange(1, 6)):
                op = rng.choice(list(AluOp))
                dst = rng.choice(registers)
                src1 = rng.choice(registers)
                src2 = rng.choice(registers + [rng.getrandbits(8)])
                updates.append(UpdateInstruction(dst=dst, op=op, src1=src1, src2=src2))
                b = src2 if isinstance(src2, int) else snapshot[src2]
                writes.append((dst, functions[op](snapshot[src1], b)))
            expected = dict(snapshot)
            for dst, value in writes:
                expected[dst] = value
            result = execute_updates(EfsmEntry(updates=updates), pkt, ctx, globals_)
            assert list(result.regs) == [expected[f"R{i}"] for i in range(4)]
            assert list(result.globals[:4]) == [expected[f"G{i}"] for i in range(4)]


class TestProcessStage:
    def test_wildcard_stateless_forward(self):
        stage = stage_of(
            StageConfig(
                kind=StageKind.STATELESS,
                efsm_table=[EfsmEntry(actions=[OutputAction(port=1)])],
            )
        )
        for port in range(3):
            outcome = stage.process(make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=port))
            assert outcome.verdict is Verdict.FORWARD
            assert outcome.port == 1

    @pytest.mark.parametrize(
        "default,verdict",
        [(TableDefault.DROP, Verdict.DROP), (TableDefault.GOTO_NEXT, Verdict.CONTINUE)],
    )
    def test_empty_table_uses_table_default(self, default, verdict):
        stage = stage_of(StageConfig(kind=StageKind.STATELESS, table_default=default))
        outcome = stage.process(make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=0))
        assert outcome.verdict is verdict
        assert stage.stats.table_default_hits == 1

    def test_rewrite_applies_before_output_and_input_is_untouched(self):
        stage = stage_of(
            StageConfig(
                kind=StageKind.STATELESS,
                efsm_table=[
                    EfsmEntry(
                        actions=[
                            SetFieldAction(field="ip_src", value="1.0.0.1"),
                            OutputAction(port=0),
                        ]
                    )
                ],
            )
        )
        pkt = make_packet("10.0.0.2:80", "2.0.0.7:678", in_port=2)
        outcome = stage.process(pkt)
        assert outcome.packet.ip_src == 0x01000001
        assert pkt.ip_src == 0x0A000002

    def test_stateful_counter_sees_its_own_commits(self):
        key = ExtractorConfig(selectors=["ip_src", "l4_src", "ip_dst", "l4_dst"])
        stage = stage_of(
            StageConfig(
                kind=StageKind.STATEFUL,
                lookup_extractor=key,
                efsm_table=[
                    EfsmEntry(
                        actions=[OutputAction(port=1)],
                        next_state=NextState(state=1),
                        updates=[UpdateInstruction(dst="R0", op=AluOp.ADD, src1="R0", src2=1)],
                    )
                ],
            )
        )
        for i in range(5):
            stage.process(make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=2, ts=float(i)))
        [(_, ctx)] = list(stage.table.items())
        assert ctx.regs[0] == 5
        assert stage.stats.misses == 1
        assert stage.stats.hits == 4
        assert stage.stats.commits == 5

    def test_full_table_counts_rejected_commits(self):
        key = ExtractorConfig(selectors=["l4_src"])
        stage = stage_of(
            StageConfig(
                kind=StageKind.STATEFUL,
                lookup_extractor=key,
                efsm_table=[
                    EfsmEntry(actions=[OutputAction(port=1)], next_state=NextState(state=1))
                ],
            ),
            capacity=2,
        )
        verdicts = [
            stage.process(make_packet(f"1.1.1.1:{port}", "2.2.2.2:2", in_port=2)).verdict
            for port in (1, 2, 3)
        ]
        assert verdicts == [Verdict.FORWARD] * 3
        assert stage.stats.rejected_commits == 1
        assert len(stage.table) == 2

    def test_evictions_during_commit_are_counted(self):
        key = ExtractorConfig(selectors=["l4_src"])
        stage = stage_of(
            StageConfig(
                kind=StageKind.STATEFUL,
                lookup_extractor=key,
                efsm_table=[
                    EfsmEntry(
                        actions=[OutputAction(port=1)],
                        next_state=NextState(state=1, idle_timeout=1.0),
                    )
                ],
            ),
            capacity=1,
        )
        stage.process(make_packet("1.1.1.1:1", "2.2.2.2:2", in_port=2, ts=0.0))
        outcome = stage.process(make_packet("1.1.1.1:2", "2.2.2.2:2", in_port=2, ts=5.0))
        assert outcome.committed_state == 1
        assert stage.stats.evictions == 1
        assert stage.stats.rejected_commits == 0
        assert len(stage.table) == 1
