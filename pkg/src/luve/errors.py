"""Exception hierarchy shared by every luve module."""


class LuveError(Exception):
    """Base class for all errors raised by luve."""


class ContractError(LuveError, ValueError):
    """An operation was called with inputs that violate its precondition."""


class DimensionError(ContractError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(LuveError, ValueError):
    """A configuration value or file is invalid."""


class TrainingDivergedError(LuveError, RuntimeError):
    """The training loss became non-finite."""


class ValidationError(LuveError, ValueError):
    """Structured input (e.g. an MLLM response) failed validation.

    ``category`` is a short machine-readable tag such as ``"range"`` or
    ``"missing_key"``.
    """

    def __init__(self, category: str, message: str):
        super().__init__(f"[{category}] {message}")
        self.category = category


class MissingArtifactError(LuveError, FileNotFoundError):
    """A checkpoint, dataset or other required file does not exist."""
