"""Exception hierarchy shared by every rockgpt module."""


class RockGPTError(Exception):
    """Base class for all package errors."""


class DimensionError(RockGPTError, ValueError):
    """Operand shapes or channel counts do not agree."""


class GeometryError(RockGPTError, ValueError):
    """Spatial extents are incompatible with a kernel, stride or factor."""


class ConfigurationError(RockGPTError, ValueError):
    """A hyperparameter or configuration value is out of range."""


class DefinitionError(RockGPTError, ValueError):
    """A quantity is mathematically undefined for the given input."""


class NonFiniteError(RockGPTError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""


class VocabularyError(RockGPTError, ValueError):
    """A token index lies outside the codebook."""


class ExtractionError(RockGPTError, ValueError):
    """A volume is too short to extract the requested windows."""


class FormatError(RockGPTError, ValueError):
    """A file has a bad magic number, version or truncated payload."""


class ChecksumError(FormatError):
    """Stored and recomputed checksums disagree."""


class DependencyError(RockGPTError):
    """A stage-2 checkpoint cannot find or verify its stage-1 parent."""


class StabilityError(RockGPTError, ValueError):
    """Lattice Boltzmann relaxation time violates tau > 1/2."""


class DivergenceError(RockGPTError, FloatingPointError):
    """A simulation produced non-finite values."""


class ConvergenceError(RockGPTError):
    """A result was requested from an unconverged simulation."""
