"""Exception hierarchy shared by all dtcd modules.

The CLI maps these onto process exit codes: ConfigurationError -> 2,
DataError -> 3, NumericAbortError -> 4.
"""


class DtcdError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DtcdError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(DtcdError):
    """Array shape violates an operation's contract."""


class AttentionBudgetError(DtcdError):
    """Spatial extent would allocate a position-affinity matrix beyond the
    configured budget ((H*W)^2 entries)."""


class DataError(DtcdError):
    """Problem with input rasters, manifests, or sample streams."""


class DataIntegrityError(DataError):
    """Scene checksums do not match the manifest."""


class NumericAbortError(DtcdError):
    """Training hit a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
