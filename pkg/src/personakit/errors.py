"""Exception hierarchy shared across the toolkit.

Every error the library raises deliberately derives from PersonaKitError so
the CLI can map failures to exit codes and a machine-readable report.
"""


class PersonaKitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class SchemaError(PersonaKitError):
    """A record violates the declared schema (unknown enum value, missing field)."""


class OrderingError(PersonaKitError):
    """Input that must be time-ordered is not."""


class PreconditionError(PersonaKitError):
    """A documented operation precondition does not hold."""


class ConfigError(PersonaKitError):
    """Invalid or degenerate configuration (bad caps, empty fixtures, d_pca too large)."""


class FormatError(PersonaKitError):
    """Corrupt or mismatched on-disk format (bad magic, wrong version)."""

    exit_code = 3


class ShapeError(PersonaKitError):
    """Array dimensions do not match the declared layout."""

    exit_code = 3


class StateError(PersonaKitError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class DivergenceError(PersonaKitError):
    """Training produced a non-finite loss; aborted with diagnostics."""
