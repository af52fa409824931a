"""Exception hierarchy shared by every hdseg module.

The CLI maps each class to a distinct exit status, so callers should raise
the most specific one that applies.
"""


class HDSegError(Exception):
    """Base class for all hdseg errors."""


class ConfigError(HDSegError, ValueError):
    """Invalid configuration: bad dimensions, ratios, empty inputs."""


class ContractError(HDSegError, ValueError):
    """A caller violated an operation precondition (shape, label range)."""


class FormatError(HDSegError, ValueError):
    """Malformed on-disk data."""


class StateError(HDSegError, RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""


class UntrainedModelError(StateError):
    """Classification requested before any class accumulator is nonzero."""


class NoDataError(HDSegError, ValueError):
    """A metric was requested over data that defines no value (e.g. every class has zero union)."""
