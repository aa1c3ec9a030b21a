"""Exception hierarchy shared by the whole package."""


class HDMEDError(Exception):
    """Base class for all errors raised by hdmed."""


class DimensionError(HDMEDError, ValueError):
    """An array does not have the shape the model or store expects."""


class InvalidComponentError(HDMEDError, ValueError):
    """Component parameters violate the scale-matrix invariants."""


class DegenerateInputError(HDMEDError, ValueError):
    """Input for which no component assigns finite density."""


class CollapseError(HDMEDError, RuntimeError):
    """A mixture component lost (almost) all of its responsibility mass."""

    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class FormatError(HDMEDError, ValueError):
    """A file on disk is not a valid hdmed artifact."""
