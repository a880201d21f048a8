"""Exception hierarchy.

Every error carries a short kebab-case ``code`` so the CLI can print a
single machine-parsable line without string matching on messages.
"""

from __future__ import annotations


class EcgMonError(Exception):
    code = "error"

    def __init__(self, message: str, *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def with_stage(self, stage: str) -> "EcgMonError":
        self.stage = stage
        return self


class InvalidParameter(EcgMonError, ValueError):
    code = "invalid-parameter"


class InvalidInput(EcgMonError, ValueError):
    code = "invalid-input"


class InsufficientData(EcgMonError, ValueError):
    code = "insufficient-data"


class InsufficientBeats(EcgMonError, ValueError):
    code = "insufficient-beats"


class DegenerateInput(EcgMonError, ValueError):
    code = "degenerate-input"


class SchemaError(EcgMonError, ValueError):
    code = "schema-error"


class ClassMismatch(EcgMonError, ValueError):
    code = "class-mismatch"


class EmptyDataset(EcgMonError, ValueError):
    code = "empty-dataset"


class StratificationError(EcgMonError, ValueError):
    code = "stratification-error"


class ShapeError(EcgMonError, ValueError):
    code = "shape-error"


class DegenerateBatch(EcgMonError, ValueError):
    code = "degenerate-batch"


class FormatError(EcgMonError, ValueError):
    code = "format-error"


class VersionError(EcgMonError, ValueError):
    code = "version-error"


class NotAFrame(EcgMonError, ValueError):
    code = "not-a-frame"


class CorruptFrame(EcgMonError, ValueError):
    code = "corrupt-frame"


class MalformedFrame(EcgMonError, ValueError):
    code = "malformed"


class EmptySession(EcgMonError, ValueError):
    code = "empty-session"


class StartupError(EcgMonError, OSError):
    code = "startup-error"


class DataIOError(EcgMonError, OSError):
    code = "io-error"
