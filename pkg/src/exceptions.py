"""
Exceptions module for the Slow SDE Laboratory.
Defines the error hierarchy raised by the numerical core and the CLI.
"""


class SlowSdeError(Exception):
    """Base class for all laboratory errors."""


class ConfigError(SlowSdeError):
    """Invalid, missing or unknown configuration key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericalError(SlowSdeError):
    """Base class for numerical failures."""


class NonFiniteError(NumericalError):
    """Input or state contains NaN or infinity."""


class DomainError(NumericalError):
    """Argument outside the domain of a function."""


class EigenSolverError(NumericalError):
    """Symmetric eigensolver failed to converge."""


class NonConvergentFlowError(NumericalError):
    """ODE integration exhausted its step budget or horizon."""


class ManifoldError(SlowSdeError):
    """Base class for minimizer-manifold failures."""


class OffManifoldError(ManifoldError):
    """Point is not a stationary point of the loss."""

    def __init__(self, grad_norm, tolerance):
        super().__init__(f"point is off the manifold: ‖∇L‖ = {grad_norm:.3e} > {tolerance:.1e}")
        self.grad_norm = grad_norm


class RankAmbiguityError(ManifoldError):
    """A Hessian eigenvalue falls inside the rank-threshold band."""

    def __init__(self, eigenvalue, threshold):
        super().__init__(
            f"eigenvalue {eigenvalue:.3e} is within the ambiguity band of threshold {threshold:.1e}; "
            f"change the rank threshold"
        )
        self.eigenvalue = eigenvalue
        self.threshold = threshold


class LeftBasinError(ManifoldError):
    """Retraction onto the manifold failed after an SDE step."""


class SamplerSkewError(SlowSdeError):
    """A worker ran more than one epoch ahead of the others."""


class AdmissibilityError(SlowSdeError):
    """Linear Scaling Rule factor yields non-integral K or H."""

    def __init__(self, message, suggestion=None):
        super().__init__(message)
        self.suggestion = suggestion
