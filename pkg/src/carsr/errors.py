"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class ShapeError(ValueError):
    """An array or tensor has the wrong rank, size, or channel count."""


class DomainError(ValueError):
    """A scalar argument is outside its documented range."""


class InputError(OSError):
    """Input data is missing or unusable (empty directory, no sources)."""


class NumericError(RuntimeError):
    """A computation produced non-finite values and cannot continue."""
