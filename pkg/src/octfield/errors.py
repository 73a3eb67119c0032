"""Exception types shared across the package."""


class OctfieldError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(OctfieldError):
    """Malformed input data: bad CSG arity, empty mesh, index out of range."""


class SceneError(OctfieldError):
    """Unparseable or invalid scene description."""


class FormatError(OctfieldError):
    """Corrupt or truncated binary file (model or sample dump)."""


class ConfigError(OctfieldError):
    """Invalid run configuration: unknown keys, out-of-range values."""


class SamplingError(OctfieldError):
    """A sampler could not produce the requested points (e.g. no surface hits)."""


class TrainingDiverged(OctfieldError):
    """Loss became non-finite during optimization."""
