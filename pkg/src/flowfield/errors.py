"""Exception types shared across the package."""


class FlowFieldError(Exception):
    """Base class for all flowfield errors."""


class ShapeMismatchError(FlowFieldError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(FlowFieldError, ValueError):
    """Input value outside the mathematical domain of an operation."""


class ContractError(FlowFieldError, ValueError):
    """A call violated an API precondition (e.g. non-scalar loss, empty batch)."""


class ConfigError(FlowFieldError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(FlowFieldError, ValueError):
    """A file does not conform to the expected container format."""


class CorruptionError(FlowFieldError, ValueError):
    """A file matches the format header but its payload is inconsistent."""


class DegenerateDataError(FlowFieldError, ValueError):
    """Dataset statistics are degenerate (e.g. a constant channel)."""


class DivergenceError(FlowFieldError, RuntimeError):
    """Training produced a non-finite loss."""


class EvaluationError(FlowFieldError, RuntimeError):
    """A recorded computation produced a non-finite value during verification."""
