"""Health check endpoints."""
import logging
from datetime import datetime, timezone

from fastapi import APIRouter, Depends, status

from app.api.deps import Controller, get_controller
from app.config import settings
from app.models.schemas import HealthResponse, ReadinessResponse

logger = logging.getLogger(__name__)

router = APIRouter(tags=["health"])


@router.get(
    "/health",
    response_model=HealthResponse,
    summary="Basic health check",
    status_code=status.HTTP_200_OK
)
async def health_check() -> HealthResponse:
    """Liveness probe."""
    return HealthResponse(
        status="healthy",
        timestamp=datetime.now(timezone.utc).isoformat(),
        version=settings.app_version,
        environment=settings.environment
    )


@router.get(
    "/health/ready",
    response_model=ReadinessResponse,
    summary="Readiness check: a pipeline program is loaded",
    status_code=status.HTTP_200_OK
)
async def readiness_check(ctl: Controller = Depends(get_controller)) -> ReadinessResponse:
    return ReadinessResponse(
        status="ready" if ctl.loaded else "not_ready",
        pipeline_loaded=ctl.loaded,
        timestamp=datetime.now(timezone.utc).isoformat()
    )
