class DemosegError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(DemosegError, ValueError):
    """Degenerate or invalid geometric input."""


class StreamError(DemosegError, ValueError):
    """Malformed perception-stream file or violated stream invariant."""

    def __init__(self, message, *, line=None, frame_index=None, field=None):
        parts = [message]
        if line is not None:
            parts.append(f"line {line}")
        if frame_index is not None:
            parts.append(f"frame_index {frame_index}")
        if field is not None:
            parts.append(f"field {field!r}")
        super().__init__(" | ".join(parts))
        self.line = line
        self.frame_index = frame_index
        self.field = field


class LabelError(DemosegError):
    """Labeling failed: bad prompt input, unparseable reply, or nothing confident."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class ClientError(DemosegError):
    """The language-model client failed after all retries."""


class ConfigError(DemosegError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
