from typing import Optional

from nerveseg.types import SettingValue


class NerveSegError(Exception):
    """Base class for all errors raised by nerveseg."""

    def __init__(self, message: str, value_name: Optional[str] = None):
        super().__init__(message)
        self.value_name = value_name


class ConfigurationError(NerveSegError):
    """Error raised when a setting is invalid or cannot be assigned."""

    pass


class ConfigurationKeyError(ConfigurationError, KeyError):
    """Error raised when a settings lookup or assignment names an unknown key."""

    def __str__(self) -> str:
        # KeyError would otherwise repr() the message
        return str(self.args[0])


class DuplicatedConfigurationError(ConfigurationError):
    """Error raised when a setting is given more than once at the same layer.

    Attributes
    ----------
    layer
        The layer at which the value is being set.
    source
        The original source of the value.
    value
        The original value.

    """

    def __init__(
        self,
        message: str,
        name: str,
        layer: Optional[str],
        source: Optional[str],
        value: SettingValue,
    ):
        self.layer = layer
        self.source = source
        self.value = value
        super().__init__(message, name)


class ShapeError(NerveSegError, ValueError):
    """Error raised when tensor dimensions, channels or extents do not line up."""

    pass


class DomainError(NerveSegError, ValueError):
    """Error raised when a value lies outside the range an operation accepts."""

    pass


class DivergenceError(NerveSegError, ArithmeticError):
    """Error raised when a loss or gradient becomes NaN during training."""

    pass


class DatasetError(NerveSegError):
    """Error raised when a dataset directory or subject list is unusable."""

    pass


class CheckpointError(NerveSegError):
    """Base class for checkpoint decoding errors."""

    pass


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""

    pass


class VersionMismatchError(CheckpointError):
    """The checkpoint was written with an unsupported format version."""

    pass


class TruncatedPayloadError(CheckpointError):
    """The checkpoint ends before all declared content has been read."""

    pass


class GradientCheckError(NerveSegError):
    """Error raised when analytic gradients disagree with finite differences."""

    pass
