"""Exception types shared across the toolkit."""


class UnmixError(Exception):
    """Base class for toolkit errors."""


class ConfigError(UnmixError):
    """Bad usage, malformed configuration, or inconsistent options."""


class DataFormatError(UnmixError):
    """A file on disk does not match its documented format."""


class NumericalError(UnmixError):
    """A solve failed numerically (singular system, non-finite result)."""
