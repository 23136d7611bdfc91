class TbaKitError(Exception):
    """Base class for data errors raised by the toolkit."""


class FormatError(TbaKitError, ValueError):
    """A file or document does not match its declared format.

    ``location`` names where the problem was found: a frame index, a byte
    offset or a field path.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class AssignmentError(TbaKitError, ValueError):
    pass


class PropagationError(TbaKitError, ValueError):
    pass
