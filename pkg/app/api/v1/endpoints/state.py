"""Inspect and write stage state (contexts and global registers)."""
import logging

from fastapi import APIRouter, Depends, status

from app.api.deps import Controller, get_controller
from app.core.context_table import FlowContext, seconds_to_millis, to_millis
from app.models.schemas import (
    ContextWrite,
    EvictRequest,
    EvictResponse,
    GlobalsWrite,
    PipelineStateDump,
)

logger = logging.getLogger(__name__)

router = APIRouter()


@router.get("", response_model=PipelineStateDump)
def inspect_state(ctl: Controller = Depends(get_controller)):
    pipeline = ctl.require()
    with ctl.lock:
        return pipeline.inspect_state()


@router.put("/contexts", status_code=status.HTTP_204_NO_CONTENT)
def write_context(write: ContextWrite, ctl: Controller = Depends(get_controller)) -> None:
    pipeline = ctl.require()
    now = to_millis(write.now)
    context = FlowContext(
        state=write.state,
        regs=list(write.regs),
        idle_timeout=seconds_to_millis(write.idle_timeout),
        hard_timeout=seconds_to_millis(write.hard_timeout),
        last_seen=now,
        created_at=now,
    )
    with ctl.lock:
        pipeline.write_state(write.stage, write.key, context)
    logger.info("Controller wrote stage %d context %s", write.stage, write.key)


@router.put("/globals", status_code=status.HTTP_204_NO_CONTENT)
def write_globals(write: GlobalsWrite, ctl: Controller = Depends(get_controller)) -> None:
    pipeline = ctl.require()
    with ctl.lock:
        pipeline.write_globals(write.stage, write.values)


@router.post("/evict", response_model=EvictResponse)
def evict(request: EvictRequest, ctl: Controller = Depends(get_controller)):
    pipeline = ctl.require()
    with ctl.lock:
        return EvictResponse(evicted=pipeline.evict_expired(request.now))
