"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto stable exit codes, so new errors should subclass
the most specific existing family.
"""


class SurgVidError(Exception):
    """Base class for all package errors."""


class ConfigError(SurgVidError, ValueError):
    pass


class ShapeError(SurgVidError, ValueError):
    pass


class NumericError(SurgVidError, ArithmeticError):
    pass


class InputError(SurgVidError, ValueError):
    pass


class PromptParseError(InputError):
    pass


class DataError(SurgVidError):
    """Problems with on-disk corpora: crops, capacities, containers."""


class CropError(DataError, ValueError):
    pass


class CapacityError(DataError):
    def __init__(self, message: str, available: dict | None = None):
        super().__init__(message)
        self.available = dict(available or {})


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(SurgVidError):
    pass


class ComponentTagError(CheckpointError):
    pass


class ProtocolError(SurgVidError):
    """Evaluation protocol violations (split contamination, imbalance)."""


class SampleSizeError(SurgVidError, ValueError):
    pass


class DegenerateClassError(SurgVidError, ValueError):
    pass
