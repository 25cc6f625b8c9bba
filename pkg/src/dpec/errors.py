"""Exception types shared across the package."""


class DpecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DpecError):
    """Operands have incompatible shapes."""


class DivisionDomain(DpecError):
    """Division by an exact zero in strict mode."""


class AxisOutOfRange(DpecError):
    """A reduction axis is outside the operand's rank."""


class NonScalarRoot(DpecError):
    """backward() was called on a non-scalar (or unrecorded) value."""


class NonFiniteInput(DpecError):
    """An operation received NaN or Inf where finite values are required."""


class NonFiniteLoss(DpecError):
    """Training produced a NaN/Inf loss."""


class MissingDenoiser(DpecError):
    """Stage-2 enhancement requested without denoiser parameters."""


class MissingStage1Checkpoint(DpecError):
    """Stage-2 training requires a stage-1 checkpoint to build on."""


class StageUnavailable(DpecError):
    """The checkpoint does not contain the requested stage."""


class PairingError(DpecError):
    """Low/reference image directories do not pair up by filename."""


class IoError(DpecError):
    """File could not be read or written."""


class UnsupportedFormat(DpecError):
    """Image file is in a format this package does not handle."""


class CheckpointError(DpecError):
    """Checkpoint file is corrupt or has an unsupported version."""


class ConfigError(DpecError):
    """Configuration file is malformed; message carries the line number."""
