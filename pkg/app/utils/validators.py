"""Load-time validation of pipeline programs against the machine model."""
from typing import Iterable, Optional, Union

from app.core.exceptions import PipelineLoadError
from app.models.enums import StageKind
from app.models.packet import MIRROR, OperandRef, parse_field, parse_operand
from app.models.schemas import (
    FORMAT_VERSION,
    VERDICT_ACTIONS,
    EfsmEntry,
    EngineParams,
    ExtractorConfig,
    GotoStageAction,
    OutputAction,
    PipelineConfig,
    SetFieldFromAction,
    SetMetaFromAction,
    StageConfig,
)


def _operand_bounds(
    raw: Union[int, str],
    params: EngineParams,
    stage: int,
    entry: Optional[int] = None,
) -> OperandRef:
    op = parse_operand(raw)
    if op.kind == "flow_reg" and op.index >= params.flow_registers:
        raise PipelineLoadError(
            f"flow register R{op.index} outside k={params.flow_registers}", stage, entry
        )
    if op.kind == "global_reg" and op.index >= params.global_registers:
        raise PipelineLoadError(
            f"global register G{op.index} outside h={params.global_registers}", stage, entry
        )
    return op


def validate_extractor(config: ExtractorConfig, stage: int) -> None:
    """Selector ids must parse; bidirectional selector sets must be mirror-closed."""
    names = set()
    for selector in config.selectors:
        try:
            names.add(parse_field(selector).name)
        except ValueError as exc:
            raise PipelineLoadError(str(exc), stage) from exc
    if config.bidirectional:
        for name in names:
            if name in MIRROR and MIRROR[name] not in names:
                raise PipelineLoadError(
                    f"bidirectional extractor needs {MIRROR[name]} alongside {name}", stage
                )


def validate_entry(
    entry: EfsmEntry,
    stage_cfg: StageConfig,
    config: PipelineConfig,
    stage: int,
    index: int,
) -> None:
    params = config.params

    if len(entry.updates) > params.alus:
        raise PipelineLoadError("entry exceeds ALU budget", stage, index)
    if len(entry.match_conds) > params.conditions:
        raise PipelineLoadError(
            f"entry matches {len(entry.match_conds)} conditions, m={params.conditions}",
            stage, index,
        )
    if len(entry.match_conds) > len(stage_cfg.conditions):
        raise PipelineLoadError(
            f"entry matches {len(entry.match_conds)} conditions, "
            f"stage declares {len(stage_cfg.conditions)}",
            stage, index,
        )

    verdicts = [i for i, a in enumerate(entry.actions) if isinstance(a, VERDICT_ACTIONS)]
    if len(verdicts) > 1:
        raise PipelineLoadError("entry carries more than one verdict action", stage, index)
    if verdicts and verdicts[0] != len(entry.actions) - 1:
        raise PipelineLoadError("verdict action must be the last action", stage, index)

    for action in entry.actions:
        if isinstance(action, OutputAction) and action.port >= config.ports:
            raise PipelineLoadError(
                f"output port {action.port} not declared (ports={config.ports})", stage, index
            )
        if isinstance(action, GotoStageAction):
            if action.stage <= stage:
                raise PipelineLoadError("pipeline must be acyclic", stage, index)
            if action.stage >= len(config.stages):
                raise PipelineLoadError(f"goto to missing stage {action.stage}", stage, index)
        if isinstance(action, (SetFieldFromAction, SetMetaFromAction)):
            _operand_bounds(action.source, params, stage, index)

    writes_flow = False
    for update in entry.updates:
        dst = _operand_bounds(update.dst, params, stage, index)
        writes_flow = writes_flow or dst.kind == "flow_reg"
        _operand_bounds(update.src1, params, stage, index)
        if update.src2 is not None:
            _operand_bounds(update.src2, params, stage, index)

    if stage_cfg.kind is StageKind.STATELESS:
        if entry.next_state is not None or entry.updates:
            raise PipelineLoadError("stateless entries cannot update state", stage, index)
        if entry.match_state is not None and entry.match_state.mask != 0:
            raise PipelineLoadError("stateless entries cannot match a state label", stage, index)
    elif writes_flow and entry.next_state is None:
        raise PipelineLoadError(
            "flow register update without next_state is never stored", stage, index
        )


def validate_stage(stage_cfg: StageConfig, config: PipelineConfig, stage: int) -> None:
    params = config.params
    if len(stage_cfg.conditions) > params.conditions:
        raise PipelineLoadError(
            f"{len(stage_cfg.conditions)} conditions exceed m={params.conditions}", stage
        )
    if len(stage_cfg.global_registers) > params.global_registers:
        raise PipelineLoadError(
            f"{len(stage_cfg.global_registers)} global initializers exceed "
            f"h={params.global_registers}",
            stage,
        )
    for cond in stage_cfg.conditions:
        _operand_bounds(cond.lhs, params, stage)
        _operand_bounds(cond.rhs, params, stage)

    if stage_cfg.kind is StageKind.STATEFUL:
        if stage_cfg.lookup_extractor is None:
            raise PipelineLoadError("stateful stage needs a lookup extractor", stage)
        validate_extractor(stage_cfg.lookup_extractor, stage)
        if stage_cfg.update_extractor is not None:
            validate_extractor(stage_cfg.update_extractor, stage)
    elif stage_cfg.lookup_extractor is not None or stage_cfg.update_extractor is not None:
        raise PipelineLoadError("stateless stage cannot declare key extractors", stage)

    for index, entry in enumerate(stage_cfg.efsm_table):
        validate_entry(entry, stage_cfg, config, stage, index)


def validate_port_names(port_names: dict[str, int], ports: int) -> None:
    for name, port in port_names.items():
        if not 0 <= port < ports:
            raise PipelineLoadError(f"port name {name!r} maps to undeclared port {port}")


def _stage_indices(config: PipelineConfig) -> Iterable[tuple[str, int]]:
    nat = config.nat
    if nat is None:
        return ()
    return (
        ("pointer_stage", nat.pointer_stage),
        ("stack_stage", nat.stack_stage),
        ("reverse_stage", nat.reverse_stage),
        ("forward_stage", nat.forward_stage),
    )


def validate_pipeline(config: PipelineConfig) -> None:
    """Raise ``PipelineLoadError`` for any program the engine cannot run."""
    if config.format_version != FORMAT_VERSION:
        raise PipelineLoadError(f"unsupported format_version {config.format_version}")
    validate_port_names(config.port_names, config.ports)
    for stage, stage_cfg in enumerate(config.stages):
        validate_stage(stage_cfg, config, stage)

    for label, index in _stage_indices(config):
        if index >= len(config.stages):
            raise PipelineLoadError(f"nat {label} {index} is not a stage")
        if config.stages[index].kind is not StageKind.STATEFUL:
            raise PipelineLoadError(f"nat {label} {index} must be stateful")
    if config.nat is not None:
        if config.nat.pointer_register >= config.params.global_registers:
            raise PipelineLoadError("nat pointer register outside h", config.nat.pointer_stage)
        if config.nat.port_low > config.nat.port_high:
            raise PipelineLoadError("nat port range is empty")
