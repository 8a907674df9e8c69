"""Exception types shared across the package.

The CLI maps these onto stable exit codes: configuration problems exit
with 2, corrupt artifacts with 3, runtime failures with 1.
"""


class ShapeError(ValueError):
    """Dimension mismatch; names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(ValueError):
    """Invalid configuration value or unusable experiment config."""


class DataFormatError(ValueError):
    """Malformed data file; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or structurally inconsistent."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries layer-wise activation diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
