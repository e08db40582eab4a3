"""Exception types shared across the package."""


class InvRenderError(Exception):
    pass


class FormatError(InvRenderError, ValueError):
    """Malformed or truncated binary/text input.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericDomainError(InvRenderError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, op, message="non-finite value"):
        super().__init__(f"{op}: {message}")
        self.op = op


class DegenerateNormalError(InvRenderError, ArithmeticError):
    pass


class DegenerateConfigurationError(InvRenderError, ArithmeticError):
    pass


class ContractViolation(InvRenderError, ValueError):
    pass


class ValidationError(InvRenderError, ValueError):
    pass


class MissingArtifactError(InvRenderError, FileNotFoundError):
    def __init__(self, artifact, stage):
        super().__init__(f"missing {artifact}: run {stage} first")
        self.artifact = artifact
        self.stage = stage
