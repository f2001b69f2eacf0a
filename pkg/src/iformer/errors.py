"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A model configuration is malformed or internally inconsistent."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class WeightIOError(IOError):
    """Reading or writing a weight/image file failed.

    ``offset`` is the byte offset at which a malformed file was rejected,
    when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)
