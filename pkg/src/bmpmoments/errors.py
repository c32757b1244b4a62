"""Exception hierarchy shared by every module."""


class BmpError(Exception):
    """Base class for library errors."""


class InvalidModel(BmpError, ValueError):
    """The model violates one of its structural invariants."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid model: " + "; ".join(self.problems))


class InfeasibleTarget(BmpError, ValueError):
    """A builder was asked for a mean matrix no offspring law can realise."""


class NumericalFailure(BmpError):
    """Base class for failures the CLI reports with exit code 3."""


class DominanceViolation(NumericalFailure):
    """The eigenvalue with largest real part is not real and simple in modulus."""


class IllConditioned(NumericalFailure):
    """Generalised eigenvectors could not be computed to the required accuracy."""


class NonDecaying(NumericalFailure):
    """An integrand exceeded its claimed exponential envelope."""


class AmbiguousMembership(BmpError, ValueError):
    """A spectral coefficient sits too close to the membership threshold."""


class NotInRegime(BmpError, ValueError):
    """A test function does not belong to the requested regime class."""


class PopulationExplosion(NumericalFailure):
    """A simulated population exceeded the particle cap."""
