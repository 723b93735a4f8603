"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes (see cli.EXIT_CODES), so new error
types should subclass one of the existing families rather than Exception.
"""


class QbdspinError(Exception):
    """Base class for all package errors."""


class DomainError(QbdspinError, ValueError):
    """Invalid argument value (precondition violation)."""


class DivergentIntegralError(DomainError):
    """The requested propagator integral does not converge (mu2=0 in d<3)."""


class AccuracyError(QbdspinError):
    """Quadrature could not meet the requested tolerance.

    Carries the achieved error bound in `achieved_bound`.
    """

    def __init__(self, message, achieved_bound):
        super().__init__(message)
        self.achieved_bound = achieved_bound


class GeometryError(DomainError):
    """Cutoff/boundary combination is geometrically inconsistent."""


class FrustrationError(DomainError):
    """Requested sublattice structure does not exist on this lattice."""


class SizeMismatchError(DomainError):
    """Spin configuration and coupling table refer to different lattices."""


class StructureError(QbdspinError):
    """Coupling table is not translation invariant."""


class OrderError(DomainError):
    """Coupling sign does not match the requested magnetic order."""


class UnsupportedOrderError(OrderError):
    """Displacement set frustrates the assumed two-sublattice order."""


class LswtInstabilityError(QbdspinError):
    """Spin-wave frequency squared went negative beyond tolerance.

    Signals that the assumed ordered state is not the harmonic ground
    state of the given coupling table.
    """


class InsufficientDataError(DomainError):
    """Too few records/frames for the requested estimator."""


class BracketError(QbdspinError):
    """No Binder-cumulant crossing inside the temperature grid.

    `u4_table` holds the computed U4(T, L) values so the caller can still
    inspect or persist them.
    """

    def __init__(self, message, u4_table=None):
        super().__init__(message)
        self.u4_table = u4_table


class StepSizeError(QbdspinError):
    """Damped integration became unstable (energy grew despite damping).

    `trajectory` holds the frames recorded up to the abort point.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class FitError(QbdspinError):
    """Dispersion exponent fit window is unusable."""


class ConfigError(QbdspinError):
    """Invalid or unknown run-configuration content."""
