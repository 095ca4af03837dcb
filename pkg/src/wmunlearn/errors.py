"""Exception hierarchy.

Every error derives from WmUnlearnError and from the closest builtin, so callers
may catch either.
"""

from typing import Any, Optional


class WmUnlearnError(Exception):
    """Base class for all wmunlearn errors."""


class ShapeError(WmUnlearnError, ValueError):
    """Operand shapes do not compose at a graph node."""

    def __init__(self, message: str, node: Optional[str] = None):
        self.node = node
        super().__init__(f"[{node}] {message}" if node else message)


class GraphError(WmUnlearnError, RuntimeError):
    """Graph used out of order (e.g. gradients before evaluate)."""


class LabelError(WmUnlearnError, ValueError):
    """Class index outside 0..C-1."""


class DistributionError(WmUnlearnError, ValueError):
    """Invalid probability vector for a divergence."""


class NonFiniteError(WmUnlearnError, FloatingPointError):
    """A gradient or objective became NaN/inf."""

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        super().__init__(message)


class TrainingDivergedError(WmUnlearnError, RuntimeError):
    """Loss became non-finite during optimization.

    ``model`` holds the last model state known to be finite.
    """

    def __init__(self, message: str, diagnostics: dict[str, Any], model: Any = None):
        self.diagnostics = diagnostics
        self.model = model
        super().__init__(f"{message}: {diagnostics}")


class DatasetError(WmUnlearnError, ValueError):
    """Dataset or generator spec is unusable."""


class IdxFormatError(WmUnlearnError, ValueError):
    """Malformed IDX file."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    def __init__(self, path: str, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: truncated payload, expected {expected} bytes, got {actual}")


class IdxCountMismatchError(IdxFormatError):
    pass


class CheckpointError(WmUnlearnError, ValueError):
    """Container file cannot be read."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ArchMismatchError(CheckpointError):
    pass


class ArchError(WmUnlearnError, ValueError):
    """Adjacent layers of an architecture do not compose."""


class ConfigError(WmUnlearnError, ValueError):
    """Run configuration failed validation."""


class UnsupportedSettingError(WmUnlearnError, ValueError):
    """Operation is not defined for the requested data setting."""


class RegimeError(WmUnlearnError, ValueError):
    """Closed form evaluated outside its valid regime."""


class ModelMutatedError(WmUnlearnError, AssertionError):
    """A frozen model was modified."""


class StageError(WmUnlearnError, RuntimeError):
    """A pipeline stage failed; the partial run directory is kept."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
