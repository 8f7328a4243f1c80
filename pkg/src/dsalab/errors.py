"""Exception types shared across the package."""


class DsalabError(Exception):
    """Base class for all package-specific errors."""


class ConnectivityError(DsalabError):
    """A graph (or a window of a time-varying schedule) is not connected."""


class ValidationError(DsalabError):
    """An input matrix or distribution violates a structural invariant."""


class DimensionError(DsalabError, ValueError):
    """Mismatched or unsupported dimensions."""


class ErgodicityError(DsalabError):
    """A Markov kernel is reducible, periodic, or otherwise non-ergodic."""


class StateError(DsalabError, ValueError):
    """A state index is outside the kernel's state space."""


class CapacityError(DsalabError):
    """An explicit product construction would exceed the configured cap."""


class RankError(DsalabError):
    """A linear system defining a solution is singular or rank-deficient."""


class ConfigError(DsalabError, ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DivergenceError(DsalabError):
    """Iterates left the finite range; carries the last valid iteration."""

    def __init__(self, message: str, last_valid_t: int):
        super().__init__(message)
        self.last_valid_t = last_valid_t


class IncompleteConstantsError(DsalabError):
    """A certificate was requested from a bundle with missing constants."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing constants: " + ", ".join(self.missing))


class FitError(DsalabError):
    """A rate fit was requested on unusable data."""


class ReportError(DsalabError):
    """A verification report was requested from an incomplete record."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing record columns: " + ", ".join(self.missing))
