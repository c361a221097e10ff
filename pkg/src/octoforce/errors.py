"""Exception classes shared across the pipeline.

Every CLI-visible failure maps to one of these so the command line can
emit a single machine-parsable ``<ErrorClass>: <message>`` line.
"""


class OctoforceError(Exception):
    """Base class for all structured errors raised by this package."""


class ShapeError(OctoforceError):
    """Tensor shapes are incompatible for the requested operation."""


class GraphError(OctoforceError):
    """Misuse of the autodiff graph (non-scalar backward, reuse, detached root)."""


class ConfigError(OctoforceError):
    """Invalid or out-of-range configuration value. Message names the field."""


class DatasetFormatError(OctoforceError):
    """Dataset container is missing, corrupt, or has the wrong format tag."""


class CheckpointFormatError(OctoforceError):
    """Checkpoint file is missing, corrupt, or has the wrong format tag."""


class TrainingDivergedError(OctoforceError):
    """Loss became NaN/Inf during training. Message carries step and lr."""
