"""Exception taxonomy for the two-matrix laboratory.

Every numerical failure mode gets its own class so callers can react to
the *kind* of breakdown (quadrature budget, Gram conditioning, geometry)
instead of parsing messages.
"""


class TwomatError(Exception):
    """Base class for all errors raised by this package."""


class QuadratureNoConvergence(TwomatError):
    """Adaptive quadrature exceeded its refinement budget."""


class GramSingular(TwomatError):
    """A leading principal minor of the Gram matrix is <= 0 at working
    precision; the biorthogonal family does not exist numerically
    (usually means precision_bits is too low for this n)."""


class DimensionError(TwomatError):
    """Correlation point counts exceed the number of available kernels."""


class ConstraintViolation(TwomatError):
    """A discretized measure violates mass totals or the upper constraint."""


class NoConvergence(TwomatError):
    """Iterative solver exhausted its budget without meeting tolerance."""


class NonRegularPotential(TwomatError):
    """Equilibrium solution fails a regularity property (interior zero of
    the density, non-square-root edge, or equality off the support)."""


class TooCloseToSupport(TwomatError):
    """Cauchy transform requested too close to the measure's support."""


class FitResidualTooLarge(TwomatError):
    """Polynomial fit of the symmetric sheet functions does not validate;
    signals that the equilibrium solution is not accurate enough."""


class RankDeficiency(TwomatError):
    """Candidate differential pool has too small a rank for the genus."""


class SheetCollision(TwomatError):
    """Root continuation found two sheets closer than the safe gap."""


class PathThroughBranchPoint(TwomatError):
    """An integration path passes through (or too near) a branch point."""


class ZeroCountMismatch(TwomatError):
    """A fixed oval hosts 0 or >= 2 zeros of the theta pullback."""


class LinearSystemSingular(TwomatError):
    """The constraint system for a differential has no unique solution."""


class ResidueMismatch(TwomatError):
    """A constructed differential fails its prescribed residue table."""


class TruncationBudgetExceeded(TwomatError):
    """Theta lattice sum would need more points than the budget allows."""


class ThetaDenominatorSmall(TwomatError):
    """Theta denominator nearly vanishes (point close to the divisor)."""


class PointOutsideBulk(TwomatError):
    """Bulk scaling point is not an interior point of positive density."""
