"""Exception types shared across the package.

Every error the service surfaces to clients carries a stable machine-readable
``code`` so HTTP handlers can map it without string matching.
"""


class LandloopError(Exception):
    code = "internal"


class DimensionError(LandloopError, ValueError):
    """Tensor shapes disagree; message names the offending axis."""

    code = "dimension"


class ConfigurationError(LandloopError, ValueError):
    code = "configuration"


class CoordinateError(LandloopError, ValueError):
    """A point lies outside the extent it must fall in."""

    code = "coordinate"


class ExtentError(LandloopError, ValueError):
    """Input too small or misaligned for the network geometry."""

    code = "extent"

    def __init__(self, msg, min_extent=None):
        super().__init__(msg)
        self.min_extent = min_extent


class UnsupportedLayerError(LandloopError, ValueError):
    code = "unsupported_layer"


class EmptyLabelsError(LandloopError, ValueError):
    code = "empty_labels"


class ChecksumError(LandloopError, ValueError):
    code = "checksum"


class VersionError(LandloopError, ValueError):
    code = "version"


class FormatError(LandloopError, ValueError):
    """Malformed binary file; message includes the byte offset."""

    code = "format"


class StaleCacheError(LandloopError, RuntimeError):
    """Feature cache was built under a different trunk."""

    code = "stale_cache"


class PaletteError(LandloopError, ValueError):
    code = "palette"


class SessionNotFoundError(LandloopError, LookupError):
    code = "not_found"


class SceneNotFoundError(LandloopError, LookupError):
    code = "not_found"


class RetrainBusyError(LandloopError, RuntimeError):
    """A retrain is already in flight for this session."""

    code = "busy"
