"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes, so new error types should subclass one
of the four roots below rather than Exception directly.
"""


class LansagnnError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(LansagnnError):
    """Invalid configuration or invalid inputs to an operation (exit code 2)."""


class UpstreamError(LansagnnError):
    """A required upstream stage artifact is missing (exit code 3)."""


class BackendError(LansagnnError):
    """A backend could not produce an answer (exit code 4 when fatal)."""


class DataError(LansagnnError):
    """Malformed or inconsistent data files."""


# graph-core
class MalformedRecord(DataError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class DanglingEdge(DataError):
    pass


class DuplicateNodeId(DataError):
    pass


class MissingLabels(ConfigError):
    pass


class InvalidProbability(ConfigError):
    pass


# llm-gateway
class MissingBinding(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"template placeholder {{{name}}} has no binding")
        self.name = name


class NetworkExhausted(BackendError):
    pass


class CacheMiss(BackendError):
    pass


class AuthMissing(ConfigError):
    pass


class OracleNeedsLabels(ConfigError):
    pass


# edge-filter
class TrainSetTooSmall(ConfigError):
    pass


# dual-finetune
class CountExceedsTrain(ConfigError):
    pass


class EmptyNeighborhood(DataError):
    pass


# embed-aggregate
class EmptyDocument(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# gnn
class ShapeMismatch(ConfigError):
    pass


class NonFiniteLoss(LansagnnError):
    pass


class EmptyTestSet(ConfigError):
    pass


# cli / pipeline
class MissingUpstream(UpstreamError):
    def __init__(self, stage: str):
        super().__init__(f"stage '{stage}' has not produced its artifacts yet")
        self.stage = stage


class ConfigInvalid(ConfigError):
    def __init__(self, field: str, reason: str = ""):
        msg = f"invalid config field '{field}'"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.field = field
