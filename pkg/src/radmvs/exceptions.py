"""Exception hierarchy.

Every error carries a short machine-readable ``category`` string; the CLI
prints it on stderr and maps it to an exit status.
"""


class RadMVSError(Exception):
    category = "error"
    exit_code = 1


class FormatError(RadMVSError, ValueError):
    """Malformed or truncated file."""

    category = "format"
    exit_code = 3


class ConfigError(RadMVSError, ValueError):
    """Invalid parameters or unresolved paths."""

    category = "config"
    exit_code = 2


class GeometryError(RadMVSError, ValueError):
    """Degenerate geometric input (duplicate cameras, empty masks, ...)."""

    category = "geometry"
    exit_code = 4
