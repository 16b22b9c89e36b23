"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> usage error (1),
DataError and subclasses -> data error (2), anything else -> internal (3).
"""

from __future__ import annotations


class StructokError(Exception):
    """Base class for all package errors."""


class ConfigError(StructokError):
    """Invalid configuration (bad field values, violated invariants)."""


class DataError(StructokError):
    """Problem with input data or files."""


class ParseError(DataError):
    """Malformed JSON input; carries line and byte-offset context."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", offset {offset}" if offset is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.offset = offset


class SchemaError(DataError):
    """A required field is missing or has the wrong shape; names the field."""


class ValidationError(DataError):
    """Field values violate a domain invariant (e.g. an impossible date)."""


class TokenizerFormatError(DataError):
    """Tokenizer file is malformed, has an unknown version, or fails its checksum."""


class LayoutError(DataError):
    """A token sequence violates the BOS/visit/VSEP/EOS layout invariant."""


class CheckpointError(DataError):
    """Model checkpoint file is malformed or inconsistent."""


class DegenerateInputError(DataError):
    """A metric was asked to score an input it is undefined on (e.g. single-class AUROC)."""
