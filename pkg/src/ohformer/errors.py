"""
Exception hierarchy shared by every ohformer module.

Library code raises these; only the command-line layer turns them into
exit codes (see ``ohformer.cli.EXIT_CODES``).
"""

from typing import Optional, Sequence


class OhformerError(Exception):
    """Base class for all errors raised by ohformer."""


class ConfigurationError(OhformerError):
    """Invalid settings or geometry (kernel too large, grid too small, bad key)."""


class DimensionError(OhformerError):
    """Operand shapes do not fit together."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            rendered = " vs ".join(str(tuple(s)) for s in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ContractError(OhformerError):
    """A caller broke an operation's precondition."""


class ParseError(ConfigurationError):
    """Malformed text, with the character position where parsing failed."""

    def __init__(self, message: str, position: int, text: Optional[str] = None):
        detail = f"{message} at position {position}"
        if text is not None:
            detail += f" in {text!r}"
        super().__init__(detail)
        self.position = position
        self.text = text


class CheckpointFormatError(OhformerError):
    """A checkpoint file could not be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointFormatError):
    """A checkpoint was written with an unsupported format version."""

    def __init__(self, version: int, offset: int):
        super().__init__(f"unsupported checkpoint version {version}", offset)
        self.version = version


class DataError(OhformerError):
    """Dataset input is missing or unreadable."""


class OutputError(OhformerError):
    """An output file or directory could not be written."""


class EvaluationError(OhformerError):
    """Retrieval evaluation has nothing to score."""


class NumericError(OhformerError):
    """A non-finite value appeared during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step
