import json

import pytest

from app.core.context_table import FlowContext
from app.core.exceptions import PipelineLoadError, StateWriteError
from app.core.pipeline import Pipeline
from app.core.serialization import parse_pipeline, serialize_pipeline
from app.core.stage import Stage
from app.models.enums import StageKind, Verdict
from app.models.packet import parse_ip
from app.models.schemas import (
    EfsmEntry,
    GotoStageAction,
    OutputAction,
    PipelineConfig,
    SetMetaAction,
    StageConfig,
)


def stateless(*entries: EfsmEntry) -> StageConfig:
    return StageConfig(kind=StageKind.STATELESS, efsm_table=list(entries))


@pytest.fixture
def zeroed_metadata(monkeypatch):
    """Wipe the metadata word before every stage after the first."""
    original = Stage.process

    def process(self, pkt, ticket=None):
        if self.index > 0:
            pkt = pkt.copy()
            pkt.metadata = 0
        return original(self, pkt, ticket)

    monkeypatch.setattr(Stage, "process", process)


class TestProcessPacket:
    def test_single_wildcard_stage(self, packet):
        pl = Pipeline.from_config(
            PipelineConfig(stages=[stateless(EfsmEntry(actions=[OutputAction(port=1)]))])
        )
        decision = pl.process_packet(packet("1.1.1.1:1", "2.2.2.2:2", in_port=0))
        assert decision.verdict is Verdict.FORWARD
        assert decision.port == 1

    def test_goto_skips_stages_and_metadata_carries_over(self, packet):
        config = PipelineConfig(
            stages=[
                stateless(
                    EfsmEntry(
                        actions=[
                            SetMetaAction(bits="meta[3:0]", value=5),
                            GotoStageAction(stage=2),
                        ]
                    )
                ),
                stateless(EfsmEntry(actions=[OutputAction(port=0)])),
                stateless(
                    EfsmEntry(
                        match_fields=[{"field": "meta[3:0]", "value": 5}],
                        actions=[OutputAction(port=2)],
                    )
                ),
            ]
        )
        pl = Pipeline.from_config(config, trace=True)
        decision = pl.process_packet(packet("1.1.1.1:1", "2.2.2.2:2", in_port=0))
        assert decision.port == 2
        assert [step.stage for step in decision.trace] == [0, 2]

    def test_implicit_succession_and_fall_off_drop(self, packet):
        config = PipelineConfig(
            stages=[stateless(EfsmEntry(label="pass")), stateless(EfsmEntry(label="pass"))]
        )
        pl = Pipeline.from_config(config, trace=True)
        decision = pl.process_packet(packet("1.1.1.1:1", "2.2.2.2:2", in_port=0))
        assert decision.verdict is Verdict.DROP
        assert decision.port is None
        assert [step.entry_label for step in decision.trace] == ["pass", "pass"]

    def test_trace_is_off_by_default(self, firewall, packet):
        decision = firewall.process_packet(packet("10.0.0.2:123", "8.0.0.5:678", in_port=2))
        assert decision.trace is None


class TestState:
    def test_fresh_pipeline_is_empty(self, lb):
        dump = lb.inspect_state()
        assert all(not stage.contexts for stage in dump.stages)
        assert all(not any(stage.globals) for stage in dump.stages)

    def test_write_then_inspect_is_identity(self, firewall):
        key = {"ip_src": "10.0.0.2", "l4_src": 123, "ip_dst": "8.0.0.5", "l4_dst": 678}
        firewall.write_state(0, key, FlowContext(state=2, regs=[1, 2], idle_timeout=20000))
        [ctx] = firewall.inspect_state().stages[0].contexts
        assert ctx.state == 2
        assert ctx.regs == [1, 2, 0, 0]
        assert ctx.idle_timeout == 20.0
        assert ctx.key_text == "{8.0.0.5:678,10.0.0.2:123}"

    def test_pushed_stack_slot_feeds_the_nat_rewrite(self, nat_config, packet):
        pl = Pipeline.from_config(nat_config)
        pl.write_state(1, {"meta[15:0]": 0}, FlowContext(state=444))
        pl.write_globals(0, {1: 1})
        decision = pl.process_packet(packet("10.0.0.4:123", "2.0.0.1:678", in_port=2))
        assert decision.port == 0
        assert decision.packet.ip_src == parse_ip("1.0.0.1")
        assert decision.packet.l4_src == 444

    @pytest.mark.parametrize(
        "stage,state,regs,message",
        [
            (0, 1 << 16, [], "16 bits"),
            (0, 1, [0] * 5, "exceed k=4"),
            (0, 1, [1 << 32], "32 bits"),
            (1, 1, [], "stateless"),
            (9, 1, [], "no stage 9"),
        ],
    )
    def test_bad_writes_are_rejected(self, firewall, stage, state, regs, message):
        key = {"ip_src": "10.0.0.2", "l4_src": 1, "ip_dst": "8.0.0.5", "l4_dst": 2}
        with pytest.raises(StateWriteError, match=message):
            firewall.write_state(stage, key, FlowContext(state=state, regs=regs))

    def test_write_with_incomplete_key_is_rejected(self, firewall):
        with pytest.raises(StateWriteError, match="bad key"):
            firewall.write_state(0, {"ip_src": "10.0.0.2"}, FlowContext(state=1))

    def test_global_writes_are_bounded(self, lb):
        lb.write_globals(0, {0: 7})
        assert lb.inspect_state().stages[0].globals[0] == 7
        with pytest.raises(StateWriteError, match="G8"):
            lb.write_globals(0, {8: 1})
        with pytest.raises(StateWriteError, match="32 bits"):
            lb.write_globals(0, {0: 1 << 32})

    def test_evict_expired_sweeps_every_stage(self, firewall, packet):
        firewall.process_packet(packet("10.0.0.2:123", "8.0.0.5:678", in_port=2, ts=0.0))
        assert firewall.evict_expired(10.0) == 0
        assert firewall.evict_expired(25.0) == 1
        assert not firewall.inspect_state().stages[0].contexts


class TestDocuments:
    def test_translated_program_survives_the_wire_format(self, nat_config):
        assert parse_pipeline(serialize_pipeline(nat_config)) == nat_config

    def test_backward_goto_is_rejected_at_load(self):
        document = {
            "stages": [
                {
                    "kind": "stateless",
                    "efsm_table": [{"actions": [{"type": "goto_stage", "stage": 0}]}],
                }
            ]
        }
        with pytest.raises(PipelineLoadError) as info:
            parse_pipeline(json.dumps(document))
        assert (info.value.stage, info.value.entry) == (0, 0)
        assert "acyclic" in str(info.value)

    def test_unknown_field_is_located(self):
        document = {
            "stages": [
                {
                    "kind": "stateless",
                    "efsm_table": [
                        {"actions": [{"type": "drop"}]},
                        {"match_fields": [{"field": "ip_foo", "value": 1}]},
                    ],
                }
            ]
        }
        with pytest.raises(PipelineLoadError) as info:
            parse_pipeline(json.dumps(document))
        assert (info.value.stage, info.value.entry) == (0, 1)
        assert "unknown field id" in str(info.value)

    def test_alu_budget_is_enforced(self):
        updates = [{"dst": "R0", "op": "add", "src1": "R0", "src2": 1} for _ in range(6)]
        document = {
            "stages": [
                {
                    "kind": "stateful",
                    "lookup_extractor": {"selectors": ["ip_src"]},
                    "efsm_table": [{"actions": [{"type": "drop"}], "updates": updates}],
                }
            ]
        }
        with pytest.raises(PipelineLoadError, match="ALU budget") as info:
            parse_pipeline(json.dumps(document))
        assert (info.value.stage, info.value.entry) == (0, 0)

    def test_condition_slot_must_be_declared(self):
        document = {
            "stages": [
                {
                    "kind": "stateless",
                    "conditions": [{"op": "eq", "lhs": "l4_dst", "rhs": 80}],
                    "efsm_table": [
                        {"match_conds": ["*", "true"], "actions": [{"type": "drop"}]}
                    ],
                }
            ]
        }
        with pytest.raises(PipelineLoadError, match="stage declares 1") as info:
            parse_pipeline(json.dumps(document))
        assert (info.value.stage, info.value.entry) == (0, 0)

    def test_output_to_undeclared_port(self):
        document = {
            "ports": 2,
            "stages": [
                {"kind": "stateless", "efsm_table": [{"actions": [{"type": "output", "port": 2}]}]}
            ],
        }
        with pytest.raises(PipelineLoadError, match="not declared"):
            parse_pipeline(json.dumps(document))

    def test_stateful_stage_defaults_update_extractor(self):
        document = {
            "stages": [
                {
                    "kind": "stateful",
                    "lookup_extractor": {"selectors": ["ip_src"]},
                    "efsm_table": [],
                }
            ]
        }
        config = parse_pipeline(json.dumps(document))
        assert config.stages[0].update_extractor == config.stages[0].lookup_extractor


class TestNoHiddenChannel:
    def test_firewall_needs_metadata(self, firewall, packet, zeroed_metadata):
        firewall.process_packet(packet("10.0.0.2:123", "8.0.0.5:678", in_port=2, ts=0.0))
        reply = firewall.process_packet(packet("8.0.0.5:678", "10.0.0.2:123", in_port=1, ts=0.1))
        assert reply.verdict is Verdict.DROP

    def test_load_balancer_needs_metadata(self, lb, packet, zeroed_metadata):
        lb.process_packet(packet("2.0.0.7:678", "1.0.0.1:80", in_port=0, ts=0.0))
        second = lb.process_packet(packet("2.0.0.8:679", "1.0.0.1:80", in_port=0, ts=0.1))
        assert second.packet.ip_dst == parse_ip("10.0.0.2")

    def test_load_balancer_alternates_with_metadata(self, lb, packet):
        lb.process_packet(packet("2.0.0.7:678", "1.0.0.1:80", in_port=0, ts=0.0))
        second = lb.process_packet(packet("2.0.0.8:679", "1.0.0.1:80", in_port=0, ts=0.1))
        assert second.packet.ip_dst == parse_ip("10.0.0.3")
