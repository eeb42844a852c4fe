"""Exception and warning types shared across the package."""


class PolysweepError(Exception):
    """Base class for all package-specific errors."""


class InfeasiblePoint(PolysweepError):
    """A point violates the polyhedron inequalities beyond tolerance."""


class QpFailure(PolysweepError):
    """A projection subproblem did not produce a usable solution."""


class IterationCap(QpFailure):
    """An active-set iteration exceeded its pass budget."""


class Infeasible(QpFailure):
    """The constraint system admits no feasible point."""


class NonUniqueCoefficients(PolysweepError):
    """Cone coefficients are ambiguous because active generators are dependent."""


class FitResidualTooLarge(PolysweepError):
    """A multiplier fit left a residual incompatible with sweeping dynamics."""


class LevelOutOfRange(PolysweepError):
    """Requested mesh refinement level is outside the supported range."""


class MissingReference(PolysweepError):
    """A tracking objective was requested without a reference pair."""


class LicqViolated(PolysweepError):
    """Active generators are linearly dependent where independence is required."""


class RecoveryDiverged(PolysweepError):
    """The backward multiplier recursion blew up."""


class SearchSpaceTooLarge(PolysweepError):
    """Exhaustive control enumeration would exceed the hard cap."""


class NoDescent(PolysweepError):
    """Every solver start failed to make any progress at its first iteration."""


class NotConverging(PolysweepError):
    """Successive refinement levels moved apart instead of settling."""


class ParseError(PolysweepError):
    """A problem file could not be parsed; carries a location when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{loc} {message}".strip())
        self.path = path
        self.line = line


class MissingSection(ParseError):
    """A required section is absent from a problem file."""


class GrowthWarning(UserWarning):
    """The perturbation magnitude grew far beyond the linear envelope."""


class DegeneratePolyhedronWarning(UserWarning):
    """The polyhedron is feasible but appears to have empty interior."""


class NonUniqueCoefficientsWarning(UserWarning):
    """Cone coefficients were returned but are not uniquely determined."""
