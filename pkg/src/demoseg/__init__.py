"""Keystate detection and language labeling for long-horizon robot demonstrations."""

__version__ = "0.1.0"

from .errors import ClientError, ConfigError, DemosegError, GeometryError, LabelError, StreamError  # noqa: E402
from .numerics import Box, Mask  # noqa: E402
from .stream import Episode, load_episode, save_episode  # noqa: E402

__all__ = [
    "__version__",
    "Box",
    "Mask",
    "Episode",
    "load_episode",
    "save_episode",
    "DemosegError",
    "GeometryError",
    "StreamError",
    "LabelError",
    "ClientError",
    "ConfigError",
]
