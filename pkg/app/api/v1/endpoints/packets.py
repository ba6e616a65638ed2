"""Push packets through the loaded program."""
from typing import List

from fastapi import APIRouter, Depends

from app.api.deps import Controller, get_controller
from app.models.packet import format_ip
from app.models.schemas import DecisionOut, PacketIn

router = APIRouter()


@router.post("", response_model=List[DecisionOut])
def process_packets(packets: List[PacketIn], ctl: Controller = Depends(get_controller)):
    """Process packets in order, one decision each."""
    pipeline = ctl.require()
    out = []
    with ctl.lock:
        for seq, packet in enumerate(packets):
            decision = pipeline.process_packet(packet.to_view(seq))
            pkt = decision.packet
            out.append(
                DecisionOut(
                    verdict=decision.verdict.value,
                    port=decision.port,
                    ip_src=format_ip(pkt.ip_src),
                    ip_dst=format_ip(pkt.ip_dst),
                    l4_src=pkt.l4_src,
                    l4_dst=pkt.l4_dst,
                    metadata=pkt.metadata,
                    trace=[step.as_dict() for step in decision.trace or []],
                )
            )
    return out
