"""Dynamic NAT port bucket."""
from typing import Optional

from fastapi import APIRouter, Depends, HTTPException, status

from app.api.deps import Controller, get_controller
from app.iptables.port_bucket import port_bucket_sync
from app.models.schemas import NatSyncResponse

router = APIRouter()


@router.post("/sync", response_model=NatSyncResponse)
def sync_ports(now: Optional[float] = None, ctl: Controller = Depends(get_controller)):
    """Return free ports to the switch stack; ``now`` evicts expired flows first."""
    pipeline = ctl.require()
    if ctl.bucket is None:
        raise HTTPException(
            status_code=status.HTTP_409_CONFLICT, detail="Loaded pipeline has no NAT profile"
        )
    with ctl.lock:
        result = port_bucket_sync(ctl.bucket, pipeline, now)
    return result.to_response()
