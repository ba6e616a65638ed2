"""Exception hierarchy for the OPP engine, frontend and harness."""
from typing import Optional


class OppError(Exception):
    """Base class for every error raised by this package."""


class PipelineLoadError(OppError):
    """A pipeline document was rejected at load time."""

    def __init__(self, reason: str, stage: Optional[int] = None, entry: Optional[int] = None):
        self.reason = reason
        self.stage = stage
        self.entry = entry
        super().__init__(self._render())

    def _render(self) -> str:
        where = []
        if self.stage is not None:
            where.append(f"stage {self.stage}")
        if self.entry is not None:
            where.append(f"entry {self.entry}")
        if not where:
            return self.reason
        return f"{' '.join(where)}: {self.reason}"


class StateWriteError(OppError):
    """A controller write into stage state was refused."""


class RuleParseError(OppError):
    """An iptables rule could not be parsed."""

    def __init__(
        self, reason: str, column: int, atom: Optional[str] = None, line: Optional[int] = None
    ):
        self.reason = reason
        self.column = column
        self.atom = atom
        self.line = line
        where = f"line {line} column {column}" if line is not None else f"column {column}"
        super().__init__(f"{where}: {reason}")


class TranslationError(OppError):
    """A parsed rule set cannot be mapped onto OPP stages."""


class PcapLoadError(OppError):
    """A capture file is malformed."""

    def __init__(self, reason: str, offset: int):
        self.reason = reason
        self.offset = offset
        super().__init__(f"offset {offset}: {reason}")


class OracleMismatchError(OppError):
    """A parallel replay diverged from the single-worker reference."""

    def __init__(self, flow: str, diff: str):
        self.flow = flow
        self.diff = diff
        super().__init__(f"flow {flow} diverged: {diff}")


class WorkerAbortedError(OppError):
    """A parallel run was cancelled because another worker failed."""
