"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument or input state violates a documented precondition."""


class EmptyViewError(RuntimeError):
    """A camera view sees no usable points."""


class FormatError(ValueError):
    """A file (PLY, camera JSON, scene spec, ...) is malformed or incomplete."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read, or is incompatible with the caller."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; the step was aborted."""
