"""Controller REST API, driven in-process over ASGI."""
import json

import pytest
from httpx import ASGITransport, AsyncClient

from app.api.deps import controller
from app.core.serialization import serialize_pipeline
from app.main import app
from tests.conftest import FIREWALL_RULES, TOPOLOGY

OUTBOUND = {"in_port": 2, "ip_src": "10.0.0.2", "ip_dst": "8.0.0.5", "l4_src": 123, "l4_dst": 678}
INBOUND = {"in_port": 1, "ip_src": "8.0.0.5", "ip_dst": "10.0.0.2", "l4_src": 678, "l4_dst": 123}


@pytest.fixture(autouse=True)
def fresh_controller():
    controller.reset()
    yield
    controller.reset()


@pytest.fixture
async def client():
    async with AsyncClient(transport=ASGITransport(app=app), base_url="http://test") as ac:
        yield ac


@pytest.fixture
async def firewall_loaded(client):
    response = await client.post(
        "/api/v1/pipeline/translate",
        json={"rules": FIREWALL_RULES, "topology": TOPOLOGY, "load": True},
    )
    assert response.status_code == 200
    return response.json()


def document(config) -> dict:
    return json.loads(serialize_pipeline(config))


class TestHealth:
    async def test_health(self, client):
        response = await client.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "healthy"

    async def test_not_ready_without_program(self, client):
        body = (await client.get("/health/ready")).json()
        assert body["status"] == "not_ready"
        assert body["pipeline_loaded"] is False

    async def test_ready_after_load(self, client, firewall_loaded):
        body = (await client.get("/health/ready")).json()
        assert body["pipeline_loaded"] is True


class TestProgram:
    async def test_load_returns_a_summary(self, client, lb_config):
        response = await client.put("/api/v1/pipeline", json=document(lb_config))
        assert response.status_code == 200
        summary = response.json()
        assert summary["stages"] == 3
        assert summary["stateful_stages"] == [0, 1]
        assert summary["ordered_stages"] == [0]
        assert summary["nat"] is False

    async def test_get_returns_the_loaded_document(self, client, lb_config):
        await client.put("/api/v1/pipeline", json=document(lb_config))
        response = await client.get("/api/v1/pipeline")
        assert response.json() == document(lb_config)

    async def test_bad_document_is_422_with_location(self, client):
        bad = {"stages": [{"kind": "stateless", "efsm_table": [{"actions": [
            {"type": "goto_stage", "stage": 0}
        ]}]}]}
        response = await client.put("/api/v1/pipeline", json=bad)
        assert response.status_code == 422
        body = response.json()
        assert body["error"] == "PipelineLoadError"
        assert "stage 0 entry 0" in body["detail"]

    async def test_translate_without_loading(self, client):
        response = await client.post(
            "/api/v1/pipeline/translate", json={"rules": FIREWALL_RULES, "topology": TOPOLOGY}
        )
        assert response.status_code == 200
        assert len(response.json()["stages"]) == 2
        assert not controller.loaded

    async def test_unparseable_rules_are_422(self, client):
        response = await client.post(
            "/api/v1/pipeline/translate",
            json={"rules": "iptables -A INPUT -j ACCEPT", "topology": TOPOLOGY},
        )
        assert response.status_code == 422
        assert response.json()["error"] == "RuleParseError"

    async def test_missing_body_field_is_422(self, client):
        response = await client.post("/api/v1/pipeline/translate", json={"rules": ""})
        assert response.status_code == 422
        assert response.json()["error"] == "Validation Error"


class TestPackets:
    async def test_no_program_is_409(self, client):
        response = await client.post("/api/v1/packets", json=[OUTBOUND])
        assert response.status_code == 409

    async def test_conversation(self, client, firewall_loaded):
        response = await client.post("/api/v1/packets", json=[OUTBOUND, INBOUND])
        assert response.status_code == 200
        out, back = response.json()
        assert (out["verdict"], out["port"]) == ("forward", 1)
        assert (back["verdict"], back["port"]) == ("forward", 2)

    async def test_unsolicited_is_dropped(self, client, firewall_loaded):
        [decision] = (await client.post("/api/v1/packets", json=[INBOUND])).json()
        assert decision["verdict"] == "drop"
        assert decision["port"] is None


class TestState:
    async def test_inspect_after_traffic(self, client, firewall_loaded):
        await client.post("/api/v1/packets", json=[OUTBOUND])
        dump = (await client.get("/api/v1/state")).json()
        [ctx] = dump["stages"][0]["contexts"]
        assert ctx["state"] == 12
        assert ctx["key_text"] == "{8.0.0.5:678,10.0.0.2:123}"

    async def test_written_context_admits_inbound_traffic(self, client, firewall_loaded):
        write = {
            "stage": 0,
            "key": {"ip_src": "10.0.0.2", "l4_src": 123, "ip_dst": "8.0.0.5", "l4_dst": 678},
            "state": 2,
            "idle_timeout": 20.0,
        }
        response = await client.put("/api/v1/state/contexts", json=write)
        assert response.status_code == 204
        [decision] = (await client.post("/api/v1/packets", json=[INBOUND])).json()
        assert decision["port"] == 2

    async def test_bad_write_is_400(self, client, firewall_loaded):
        write = {"stage": 1, "key": {"ip_src": "10.0.0.2"}, "state": 1}
        response = await client.put("/api/v1/state/contexts", json=write)
        assert response.status_code == 400
        assert response.json()["error"] == "StateWriteError"

    async def test_globals_and_evict(self, client, lb_config):
        await client.put("/api/v1/pipeline", json=document(lb_config))
        response = await client.put("/api/v1/state/globals", json={"stage": 0, "values": {"0": 1}})
        assert response.status_code == 204
        [decision] = (await client.post(
            "/api/v1/packets",
            json=[{"in_port": 0, "ip_src": "2.0.0.7", "ip_dst": "1.0.0.1",
                   "l4_src": 1000, "l4_dst": 80}],
        )).json()
        assert decision["ip_dst"] == "10.0.0.3"

        assert (await client.post("/api/v1/state/evict", json={"now": 5.0})).json() == {
            "evicted": 0
        }
        assert (await client.post("/api/v1/state/evict", json={"now": 30.0})).json() == {
            "evicted": 2
        }


class TestNat:
    async def test_sync_needs_a_nat_program(self, client, firewall_loaded):
        response = await client.post("/api/v1/nat/sync")
        assert response.status_code == 409

    async def test_sync_reports_exhaustion_and_refill(self, client, nat_config):
        await client.put("/api/v1/pipeline", json=document(nat_config))
        packets = [
            {"in_port": 2, "ip_src": "10.0.0.4", "ip_dst": "2.0.0.1", "l4_src": p, "l4_dst": 80}
            for p in (1, 2, 3)
        ]
        decisions = (await client.post("/api/v1/packets", json=packets)).json()
        assert [d["l4_src"] for d in decisions] == [5000, 5001, 5002]

        exhausted = (await client.post("/api/v1/nat/sync", params={"now": 1.0})).json()
        assert exhausted["exhausted"] is True
        refilled = (await client.post("/api/v1/nat/sync", params={"now": 30.0})).json()
        assert refilled["exhausted"] is False
        assert refilled["pushed"] == [5002, 5001, 5000]
