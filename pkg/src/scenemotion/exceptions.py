"""Exception hierarchy shared across the pipeline stages."""


class SceneMotionError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(SceneMotionError, ValueError):
    pass


class InvalidCellSize(SceneMotionError, ValueError):
    pass


class InvalidSigma(SceneMotionError, ValueError):
    pass


class NoMatch(SceneMotionError, LookupError):
    """No scene object matches the target query."""


class Unreachable(SceneMotionError):
    """The road map offers no path from the start to the target vicinity."""


class UnknownAction(SceneMotionError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class PlanningError(SceneMotionError):
    """The request cannot be turned into guidance (e.g. too few frames)."""


class LlmFailure(SceneMotionError):
    """Transport-level failure talking to a chat-completion endpoint."""


class ParseFailure(SceneMotionError, ValueError):
    """An LLM reply did not contain a usable JSON payload."""


class BoundsViolation(SceneMotionError, ValueError):
    pass


class ConfigError(SceneMotionError, ValueError):
    pass


class SchemaError(SceneMotionError, ValueError):
    """A document failed JSON-schema validation."""
