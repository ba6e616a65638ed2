"""Controller state shared by the API endpoints."""
import logging
import threading
from typing import Optional

from fastapi import HTTPException, status

from app.core.concurrency import derive_steering
from app.core.pipeline import Pipeline
from app.iptables.port_bucket import PortBucket, bootstrap
from app.models.enums import StageKind
from app.models.schemas import PipelineConfig, PipelineSummary

logger = logging.getLogger(__name__)


class Controller:
    """The loaded program, its port bucket and the lock serializing access.

    Packet processing, state writes and NAT sync all take ``lock``, so a sync
    never lands between a stack pop and the matching stack read.
    """

    def __init__(self) -> None:
        self.pipeline: Optional[Pipeline] = None
        self.bucket: Optional[PortBucket] = None
        self.lock = threading.RLock()

    @property
    def loaded(self) -> bool:
        return self.pipeline is not None

    def load(self, config: PipelineConfig) -> PipelineSummary:
        pipeline = Pipeline.from_config(config)
        with self.lock:
            self.pipeline = pipeline
            self.bucket = bootstrap(pipeline) if config.nat is not None else None
        logger.info("Loaded pipeline %s (%d stages)", config.name or "<unnamed>", len(pipeline))
        return summarize(config)

    def require(self) -> Pipeline:
        if self.pipeline is None:
            raise HTTPException(
                status_code=status.HTTP_409_CONFLICT, detail="No pipeline loaded"
            )
        return self.pipeline

    def reset(self) -> None:
        with self.lock:
            self.pipeline = None
            self.bucket = None


def summarize(config: PipelineConfig) -> PipelineSummary:
    plan = derive_steering(config, 1)
    return PipelineSummary(
        name=config.name,
        ports=config.ports,
        stages=len(config.stages),
        stateful_stages=[
            i for i, stage in enumerate(config.stages) if stage.kind is StageKind.STATEFUL
        ],
        nat=config.nat is not None,
        shardability=plan.shardability,
        ordered_stages=list(plan.ordered_stages),
    )


controller = Controller()


def get_controller() -> Controller:
    return controller
