from app.models.packet import format_ip
from tests.conftest import make_packet

VIP = "1.0.0.1:80"


def client(n: int, ts: float = 0.0):
    return make_packet(f"2.0.0.{n}:{1000 + n}", VIP, in_port=0, ts=ts)


def test_new_flows_alternate_between_servers(lb):
    servers = [format_ip(lb.process_packet(client(n, ts=n)).packet.ip_dst) for n in range(4)]
    assert servers == ["10.0.0.2", "10.0.0.3", "10.0.0.2", "10.0.0.3"]
    assert lb.inspect_state().stages[0].globals[0] == 4


def test_rewritten_packet_goes_to_the_server_port(lb):
    decision = lb.process_packet(client(7))
    assert decision.port == 2
    assert decision.packet.l4_dst == 80
    assert decision.packet.ip_src == client(7).ip_src


def test_flows_stick_to_their_server(lb):
    first = [format_ip(lb.process_packet(client(n, ts=n)).packet.ip_dst) for n in range(3)]
    again = [format_ip(lb.process_packet(client(n, ts=10 + n)).packet.ip_dst) for n in range(3)]
    assert again == first
    assert lb.inspect_state().stages[0].globals[0] == 3


def test_server_reply_is_rewritten_to_the_virtual_address(lb):
    lb.process_packet(client(7))
    contexts_before = [len(s.contexts) for s in lb.inspect_state().stages]

    reply = lb.process_packet(make_packet("10.0.0.2:80", "2.0.0.7:1007", in_port=2, ts=0.1))
    assert reply.port == 0
    assert format_ip(reply.packet.ip_src) == "1.0.0.1"
    assert reply.packet.l4_src == 80
    assert [len(s.contexts) for s in lb.inspect_state().stages] == contexts_before


def test_reply_from_second_server_uses_the_same_entry(lb):
    reply = lb.process_packet(make_packet("10.0.0.3:80", "2.0.0.8:1008", in_port=2))
    assert format_ip(reply.packet.ip_src) == "1.0.0.1"


def test_flow_expiry_reassigns(lb):
    assert format_ip(lb.process_packet(client(1, ts=0.0)).packet.ip_dst) == "10.0.0.2"
    # counter is now 1, so the returning flow is treated as new and lands on .3
    assert format_ip(lb.process_packet(client(1, ts=30.0)).packet.ip_dst) == "10.0.0.3"


def test_hundred_flows_split_evenly_and_stick(lb):
    first = [
        format_ip(lb.process_packet(client(n, ts=0.1 * n)).packet.ip_dst) for n in range(100)
    ]
    assert first == ["10.0.0.2", "10.0.0.3"] * 50
    assert lb.inspect_state().stages[0].globals[0] == 100

    again = [
        format_ip(lb.process_packet(client(n, ts=10 + 0.1 * n)).packet.ip_dst)
        for n in range(100)
    ]
    assert again == first
    assert lb.inspect_state().stages[0].globals[0] == 100

    for n, server in enumerate(first):
        reply = lb.process_packet(
            make_packet(f"{server}:80", f"2.0.0.{n}:{1000 + n}", in_port=2, ts=20 + 0.1 * n)
        )
        assert format_ip(reply.packet.ip_src) == "1.0.0.1"
        assert reply.port == 0
