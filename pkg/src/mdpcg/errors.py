"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with the instance dimensions."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class CapabilityError(RuntimeError):
    """The requested operation is not supported for this input."""


class InfeasibleError(RuntimeError):
    """No point satisfies both the MDP dynamics and the affine constraints."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate
