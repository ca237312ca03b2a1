"""Exception types shared across the package."""


class PalmveinError(Exception):
    """Base class for all package errors."""


class DimensionError(PalmveinError, ValueError):
    """A tensor or image has an incompatible shape; the message names the offending axis."""


class ContractError(PalmveinError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(PalmveinError, ValueError):
    """A configuration object is internally inconsistent."""


class DegenerateVectorError(PalmveinError, ValueError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class CorruptWeightsError(PalmveinError, IOError):
    """A weights file is truncated or structurally invalid."""


class StageError(PalmveinError, RuntimeError):
    """A pipeline stage failed; carries the stage name, prior artifacts persist."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class WeightsVersionError(CorruptWeightsError):
    """A weights file has an unsupported magic or version."""
