"""Exception types shared across the pipeline."""


class StructMlmError(Exception):
    """Base class for all pipeline errors."""


class EmptyDocumentError(StructMlmError):
    """No words survived extraction."""


class EmptyCorpusError(StructMlmError):
    """An operation received an empty corpus."""


class FormatError(StructMlmError):
    """A serialized document violates the format grammar.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SequenceTooLongError(StructMlmError):
    """Input sequence exceeds the model's maximum length."""


class NoMaskedPositionsError(StructMlmError):
    """Loss requested but no position carries a label."""


class EmptyHeldoutError(StructMlmError):
    """Evaluation requested on an empty held-out set."""


class DivergenceError(StructMlmError):
    """Training loss became non-finite."""


class NoValidPairsError(StructMlmError):
    """Every annotated header/keyword pair is disallowed by the pattern."""


class MismatchedReportsError(StructMlmError):
    """Two attention reports are not comparable."""


class RangeOutOfBoundsError(StructMlmError):
    """Requested token range falls outside the document."""


class VersionMismatchError(StructMlmError):
    """Checkpoint file written by an incompatible format version."""


class CorruptFileError(StructMlmError):
    """Checkpoint file is truncated or fails its checksum."""
