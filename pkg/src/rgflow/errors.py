"""Exception types shared across the package."""


class RgflowError(Exception):
    """Base class for all package errors."""


class GridMismatchError(RgflowError):
    """Operands live on different lattices."""


class ArityError(RgflowError):
    """Wrong number of arguments for a multilinear contraction."""


class MemoryGuardError(RgflowError):
    """Requested allocation exceeds the configured cap."""


class UnderResolvedError(RgflowError):
    """A kernel length scale falls below the lattice resolution guard."""


class SupercriticalError(RgflowError):
    """Parameters outside the subcritical window sigma > d/3."""


class UnsupportedDepthError(RgflowError):
    """Coupling order would need factored terms with more than two vertices."""


class FlowInstabilityError(RgflowError):
    """A flow step produced a norm jump beyond the instability guard."""


class IterationDivergedError(RgflowError):
    """A fixed-point iteration is diverging."""


class RegimeError(RgflowError):
    """Parameters outside the validity regime of the requested method."""


class EmptyWindowError(RgflowError):
    """An empty scale window or scale grid was supplied."""


class ConfigError(RgflowError):
    """Invalid or inconsistent run configuration."""


class CacheFormatError(RgflowError):
    """A binary cache file is malformed or has the wrong magic/version."""
