"""Exception hierarchy shared by every pipeline stage."""


class HistogradeError(Exception):
    """Base class; ``code`` is the machine-readable tag the CLI reports."""

    code = "error"


class ValidationError(HistogradeError, ValueError):
    code = "validation"


class ParseError(HistogradeError, ValueError):
    code = "parse"

    def __init__(self, message, line=None, field=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class DatasetWriteError(HistogradeError, OSError):
    code = "dataset_write"


class BoundsError(HistogradeError, IndexError):
    code = "bounds"


class CorruptionError(HistogradeError):
    code = "corruption"


class CapabilityError(HistogradeError, ValueError):
    code = "capability"


class ShapeError(HistogradeError, ValueError):
    code = "shape"


class ParameterError(HistogradeError, ValueError):
    code = "parameter"


class ContractError(HistogradeError, ValueError):
    code = "contract"


class NonFiniteError(HistogradeError, FloatingPointError):
    code = "non_finite"


class FormatError(HistogradeError, ValueError):
    code = "format"


class ChecksumError(FormatError):
    code = "checksum"


class ConfigError(HistogradeError, ValueError):
    code = "config"


class DegenerateSplitError(HistogradeError, ValueError):
    code = "degenerate_split"


class TrainingDivergedError(HistogradeError, FloatingPointError):
    code = "training_diverged"

    def __init__(self, message, epoch):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class UndefinedMetricError(HistogradeError, ValueError):
    code = "undefined_metric"


class DegenerateBootstrapError(HistogradeError, RuntimeError):
    code = "degenerate_bootstrap"


class StageDependencyError(HistogradeError, FileNotFoundError):
    code = "stage_dependency"

    def __init__(self, stage, missing):
        super().__init__(f"stage '{stage}' requires {missing}, which does not exist")
        self.stage = stage
        self.missing = str(missing)
