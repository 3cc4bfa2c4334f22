from __future__ import annotations


class InstanceRSRError(Exception):
    """
    Base class for errors raised by ``instance_rsr``. Every subclass carries a
    short machine-parsable ``code`` that the command line reports.
    """

    code = "E_RSR"


class ShapeError(InstanceRSRError, ValueError):
    """
    Indicates tensors or images whose sizes don't fit together, e.g. a
    dimension not divisible by the patch size, or an even-sided kernel.
    """

    code = "E_SHAPE"


class ConfigError(InstanceRSRError, ValueError):
    """
    Indicates an invalid configuration value or configuration file.
    """

    code = "E_CONFIG"


class MaskCodeError(InstanceRSRError, ValueError):
    """
    Indicates an instance ID that cannot be represented by the mask color code.
    """

    code = "E_MASK_CODE"


class CheckpointError(InstanceRSRError):
    """
    Indicates a checkpoint that is corrupt or doesn't match the requested
    configuration.
    """

    code = "E_CHECKPOINT"


class NonFiniteLossError(InstanceRSRError, FloatingPointError):
    """
    Raised when training produces a NaN or infinite loss. ``dump_path`` points
    at the saved offending batch, if it could be written.
    """

    code = "E_NAN_LOSS"

    def __init__(self, message: str, dump_path: str | None = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path


class ProbeError(InstanceRSRError, ValueError):
    """
    Indicates features or labels that a linear probe cannot be fitted on.
    """

    code = "E_PROBE"


class SelftestError(InstanceRSRError):
    """
    Raised when one or more self-test invariants fail.
    """

    code = "E_SELFTEST"


class GradCheckError(InstanceRSRError):
    """
    Raised when analytic gradients disagree with finite differences beyond
    the tolerance.
    """

    code = "E_GRAD_CHECK"
