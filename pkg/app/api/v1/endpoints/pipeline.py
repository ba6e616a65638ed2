"""Load, fetch and translate pipeline programs."""
import json
import logging
from typing import Any

from fastapi import APIRouter, Body, Depends, status

from app.api.deps import Controller, get_controller
from app.core.serialization import parse_pipeline
from app.iptables.rules import parse_rules
from app.iptables.topology import load_topology
from app.iptables.translator import translate
from app.models.schemas import PipelineConfig, PipelineSummary, TranslateRequest

logger = logging.getLogger(__name__)

router = APIRouter()


@router.put("", response_model=PipelineSummary, status_code=status.HTTP_200_OK)
def load_program(
    document: dict[str, Any] = Body(...),
    ctl: Controller = Depends(get_controller),
):
    """Replace the running program; contexts and globals start empty."""
    config = parse_pipeline(json.dumps(document))
    return ctl.load(config)


@router.get("", response_model=PipelineConfig)
def get_program(ctl: Controller = Depends(get_controller)):
    return ctl.require().config


@router.post("/translate", response_model=PipelineConfig)
def translate_rules(request: TranslateRequest, ctl: Controller = Depends(get_controller)):
    """Compile an iptables rule set against a topology, optionally loading it."""
    config = translate(parse_rules(request.rules), load_topology(request.topology))
    if request.load:
        ctl.load(config)
    return config
