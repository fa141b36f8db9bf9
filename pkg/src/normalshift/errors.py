"""Exception hierarchy for the normalshift package."""


class NormalShiftError(Exception):
    """Base class for all errors raised by this package."""


class ExprSyntaxError(NormalShiftError):
    """Malformed expression source. Carries the byte offset of the problem."""

    def __init__(self, message, source, offset):
        super().__init__(f"{message} (at offset {offset} in {source!r})")
        self.source = source
        self.offset = offset


class UnknownVariableError(ExprSyntaxError):
    """Expression references a name outside the declared variable set."""

    def __init__(self, name, source, offset):
        super().__init__(f"unknown variable {name}", source, offset)
        self.name = name


class EvalDomainError(NormalShiftError):
    """Evaluation hit a domain violation (ln of non-positive, division by
    zero, ...). Identifies the offending subexpression; never produces NaN."""

    def __init__(self, message, subexpr):
        super().__init__(f"{message} in '{subexpr}'")
        self.subexpr = subexpr


class MetricError(NormalShiftError):
    """Metric degenerate (not positive-definite) at an evaluation point."""


class SpeedFloorError(NormalShiftError):
    """Velocity modulus below the configured floor where a unit direction
    or projector is required."""


class RootFindError(NormalShiftError):
    """Bracketed scalar solve failed: no sign change in the bracket, or the
    monotonicity assumption was violated."""


class DegenerateGeneratorError(NormalShiftError):
    """Generating-function derivative below threshold: force construction
    refuses rather than regularizes."""


class FrameRankError(NormalShiftError):
    """Hypersurface tangent frame lost full rank at a sampled parameter."""


class IntegrationError(NormalShiftError):
    """Immediate precondition violation for trajectory integration.
    Mid-flight failures are recorded in trajectory metadata instead."""


class ScenarioError(NormalShiftError):
    """Scenario file is unreadable, unparsable, or fails validation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])
