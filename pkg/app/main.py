"""FastAPI controller application."""
import logging
from contextlib import asynccontextmanager
from datetime import datetime, timezone
from typing import AsyncGenerator

from fastapi import FastAPI, Request, status
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.api.deps import controller
from app.api.v1.endpoints import health, nat, packets, pipeline, state
from app.config import settings
from app.core.exceptions import (
    OppError,
    PcapLoadError,
    PipelineLoadError,
    RuleParseError,
    StateWriteError,
    TranslationError,
)
from app.core.logging import setup_logging
from app.core.serialization import load_pipeline

# Setup logging
setup_logging()
logger = logging.getLogger(__name__)

ERROR_STATUS = {
    PipelineLoadError: status.HTTP_422_UNPROCESSABLE_ENTITY,
    RuleParseError: status.HTTP_422_UNPROCESSABLE_ENTITY,
    TranslationError: status.HTTP_422_UNPROCESSABLE_ENTITY,
    PcapLoadError: status.HTTP_422_UNPROCESSABLE_ENTITY,
    StateWriteError: status.HTTP_400_BAD_REQUEST,
}


@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncGenerator[None, None]:
    """Application lifespan context manager."""
    logger.info(f"Starting {settings.app_name} v{settings.app_version}")
    logger.info(f"Environment: {settings.environment}")
    if settings.pipeline_path:
        controller.load(load_pipeline(settings.pipeline_path))

    yield

    logger.info(f"Shutting down {settings.app_name}")


# Create FastAPI application
app = FastAPI(
    title=settings.app_name,
    version=settings.app_version,
    description="Controller API for the OPP software switch",
    docs_url="/docs",
    redoc_url="/redoc",
    lifespan=lifespan
)


def _error_body(error: str, detail: object) -> dict:
    return {
        "error": error,
        "detail": detail,
        "timestamp": datetime.now(timezone.utc).isoformat()
    }


# Exception handlers
@app.exception_handler(RequestValidationError)
async def validation_exception_handler(
    request: Request,
    exc: RequestValidationError
) -> JSONResponse:
    """Handle validation errors."""
    logger.error(f"Validation error: {exc.errors()}")
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content=_error_body("Validation Error", jsonable_errors(exc)),
    )


def jsonable_errors(exc: RequestValidationError) -> list:
    return [{k: v for k, v in err.items() if k in ("loc", "msg", "type")} for err in exc.errors()]


@app.exception_handler(OppError)
async def opp_exception_handler(request: Request, exc: OppError) -> JSONResponse:
    """Engine and frontend errors become 4xx with the structured message."""
    code = ERROR_STATUS.get(type(exc), status.HTTP_400_BAD_REQUEST)
    logger.warning(f"{type(exc).__name__}: {exc}")
    return JSONResponse(status_code=code, content=_error_body(type(exc).__name__, str(exc)))


@app.exception_handler(Exception)
async def general_exception_handler(
    request: Request,
    exc: Exception
) -> JSONResponse:
    """Handle general exceptions."""
    logger.error(f"Unhandled exception: {str(exc)}", exc_info=True)
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content=_error_body(
            "Internal Server Error",
            str(exc) if settings.debug else "An unexpected error occurred",
        ),
    )


# Include routers
app.include_router(health.router)
app.include_router(pipeline.router, prefix="/api/v1/pipeline", tags=["pipeline"])
app.include_router(packets.router, prefix="/api/v1/packets", tags=["packets"])
app.include_router(state.router, prefix="/api/v1/state", tags=["state"])
app.include_router(nat.router, prefix="/api/v1/nat", tags=["nat"])


@app.get("/", tags=["root"])
async def root() -> dict:
    """Root endpoint."""
    return {
        "message": f"Welcome to {settings.app_name}",
        "version": settings.app_version,
        "docs": "/docs" if settings.debug else "Documentation disabled in production",
        "pipeline_loaded": controller.loaded,
    }
