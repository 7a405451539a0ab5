"""Exception hierarchy shared by all cqgrav modules."""


class CQError(Exception):
    """Base class for every error raised by cqgrav."""


class DimensionMismatch(CQError, ValueError):
    pass


class ShapeMismatch(CQError, ValueError):
    pass


class GridMismatch(CQError, ValueError):
    pass


class NotHermitian(CQError, ValueError):
    pass


class NotCompletelyPositive(CQError, ValueError):
    pass


class NotTracePreserving(CQError, ValueError):
    pass


class StepTooLarge(CQError, RuntimeError):
    """An explicit update pushed a quantum block outside the PSD cone."""


class InvalidCoupling(CQError, ValueError):
    pass


class SupportViolation(CQError, ValueError):
    """Back-reaction has a component outside the support of the Lindbladian couplings."""


class InvalidPair(CQError, ValueError):
    """A (D0, D2) kernel pair fails the decoherence-diffusion trade-off."""


class ResolutionTooCoarse(CQError, ValueError):
    pass


class UnsupportedFamily(CQError, ValueError):
    pass


class TruncationOverflow(CQError, OverflowError):
    pass


class MissingDecoherenceRate(CQError, ValueError):
    pass


class DivergentIntegral(CQError, ArithmeticError):
    pass


class ScenarioError(CQError, ValueError):
    """Scenario file failed to parse or validate."""
