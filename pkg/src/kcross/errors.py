"""Exception types shared across the package.

Every error raised by kcross derives from :class:`KCrossError` so callers
(and the CLI, which maps them to machine-readable JSON on stderr) can catch
one base class.
"""


class KCrossError(Exception):
    """Base class for all kcross errors."""

    code = "error"

    def payload(self):
        return {"error": self.code, "message": str(self)}


class InvalidInputError(KCrossError):
    """Input data violates a precondition (non-finite values, bad range)."""

    code = "invalid_input"


class InvalidArgumentError(KCrossError):
    """An argument value is outside its documented domain."""

    code = "invalid_argument"


class ShapeError(KCrossError):
    """Array shapes are incompatible; names the offending axis."""

    code = "shape_mismatch"

    def __init__(self, message, axis=None):
        super().__init__(message if axis is None else f"{message} (axis: {axis})")
        self.axis = axis


class ConfigurationError(KCrossError):
    """A component is wired up wrong (unknown backend, bad config key...)."""

    code = "configuration"


class StateError(KCrossError):
    """Operation requires a state the object is not in (e.g. untrained nets)."""

    code = "state"


class DataError(KCrossError):
    """Dataset-level problem (empty dataset, unrated images...)."""

    code = "data"


class NotFoundError(KCrossError):
    """A referenced entity does not exist."""

    code = "not_found"


class ValidationError(KCrossError):
    """A submitted value fails validation (off-grid rating level...)."""

    code = "validation"


class InsufficientDataError(KCrossError):
    """Not enough data points for the requested aggregation."""

    code = "insufficient_data"

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count

    def payload(self):
        out = super().payload()
        out["count"] = self.count
        return out
