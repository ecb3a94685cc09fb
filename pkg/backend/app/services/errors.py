"""Exception hierarchy shared by the numerical services."""


class CopulaVIError(Exception):
    """Base class for every error raised by copula-vi services."""


class ParameterError(CopulaVIError, ValueError):
    """A transformation or family parameter lies outside its domain."""


class SingularScaleError(CopulaVIError):
    """The factor scale has a zero diagonal entry, so Sigma is singular."""


class DegenerateSkewError(CopulaVIError):
    """kappa reached 1 numerically; the skew-normal draw needs sqrt(1 - kappa)."""


class NumericalError(CopulaVIError):
    """An iterative routine (root finding) failed to converge."""


class FlaggedStepError(CopulaVIError):
    """A stochastic ELBO or gradient estimate came out non-finite."""


class DatasetError(CopulaVIError, ValueError):
    """A design-matrix CSV violates the ingestion contract."""


class SpecError(CopulaVIError, ValueError):
    """An experiment configuration is inconsistent."""


class BoundsError(CopulaVIError):
    """A quadrature grid leaks more mass than allowed."""


class CheckpointError(CopulaVIError):
    """A checkpoint file is truncated or does not match its header."""
