"""Exception hierarchy shared across the package."""


class PNPError(Exception):
    """Base class for all errors raised by pnpmatch."""


class RangeError(PNPError, ValueError):
    """A parameter lies outside its declared range.

    ``component`` names the offending entry so callers can report it.
    """

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class InfeasibleParameterError(PNPError, ValueError):
    """Shape parameters map to PDE coefficients with no physical meaning."""


class ContractError(PNPError, ValueError):
    """An input violates a documented precondition (shape, symmetry, sign)."""


class FormatError(PNPError):
    """A binary or text file does not follow the expected layout."""


class MissingMetricError(PNPError, KeyError):
    """No cached metric exists for a requested sample id."""

    def __init__(self, sample_id):
        super().__init__(f"no metric record for sample {sample_id}")
        self.sample_id = sample_id

    def __str__(self):
        return self.args[0]


class SynthesisError(PNPError):
    """Rendering failed at a given parameter point."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta
