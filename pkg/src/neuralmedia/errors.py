"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain an operation is defined on."""


class DataError(Exception):
    """Malformed or inconsistent on-disk data (images, manifests, checkpoints)."""


class NumericalError(FloatingPointError):
    """A non-finite value was produced where finite values are required."""


class ResourceError(MemoryError):
    """A request would exceed a configured resource cap."""


class TapeStateError(RuntimeError):
    """An autodiff tape was used in an invalid state (e.g. replayed backward)."""
