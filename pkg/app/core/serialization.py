"""Pipeline documents: JSON wire format with structured load errors."""
import logging
from pathlib import Path
from typing import Union

from pydantic import BaseModel, ValidationError

from app.core.exceptions import PipelineLoadError
from app.models.schemas import PipelineConfig
from app.utils.validators import validate_pipeline

logger = logging.getLogger(__name__)


def serialize_pipeline(config: PipelineConfig) -> bytes:
    return config.model_dump_json(indent=2).encode("utf-8")


def _location(loc: tuple[Union[int, str], ...]) -> tuple[Union[int, None], Union[int, None], str]:
    stage = entry = None
    rest: list[str] = []
    items = list(loc)
    i = 0
    while i < len(items):
        part = items[i]
        nxt = items[i + 1] if i + 1 < len(items) else None
        if part == "stages" and isinstance(nxt, int):
            stage = nxt
            i += 2
            continue
        if part == "efsm_table" and isinstance(nxt, int):
            entry = nxt
            i += 2
            continue
        rest.append(str(part))
        i += 1
    return stage, entry, ".".join(rest)


def load_error_from_validation(exc: ValidationError) -> PipelineLoadError:
    """First pydantic error, re-addressed as ``stage s entry e: reason``."""
    first = exc.errors()[0]
    stage, entry, path = _location(tuple(first.get("loc", ())))
    message = str(first.get("msg", "invalid document")).removeprefix("Value error, ")
    reason = f"{path}: {message}" if path else message
    return PipelineLoadError(reason, stage, entry)


def parse_pipeline(data: Union[bytes, str]) -> PipelineConfig:
    """Parse and validate a pipeline document."""
    try:
        config = PipelineConfig.model_validate_json(data)
    except ValidationError as exc:
        raise load_error_from_validation(exc) from exc
    validate_pipeline(config)
    return config


def load_pipeline(path: Union[str, Path]) -> PipelineConfig:
    config = parse_pipeline(Path(path).read_bytes())
    logger.info(
        "Loaded pipeline %s from %s (%d stages)",
        config.name or "<unnamed>", path, len(config.stages),
    )
    return config


def dump_pipeline(config: PipelineConfig, path: Union[str, Path]) -> bytes:
    document = serialize_pipeline(config)
    Path(path).write_bytes(document)
    logger.info("Wrote pipeline %s to %s", config.name or "<unnamed>", path)
    return document


def dump_document(document: BaseModel) -> str:
    """State dumps and reports share the pipeline document's JSON style."""
    return document.model_dump_json(indent=2)
