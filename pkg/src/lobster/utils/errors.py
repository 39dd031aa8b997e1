class LobsterError(Exception):
    """
    Base class for all errors raised by the toolkit.
    """


class ShapeError(LobsterError):
    """
    Operands of a primitive do not conform.
    """
    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]
        shape_str = ' and '.join(str(s) for s in self.shapes)
        super().__init__('{0}: incompatible shapes {1}'.format(primitive, shape_str))


class NonFiniteError(LobsterError):
    """
    A NaN or Inf showed up where only finite values are allowed.
    """


class TapeError(LobsterError):
    pass


class ConfigError(LobsterError):
    pass


class DatasetError(LobsterError):
    pass


class FormatError(LobsterError):
    """
    Malformed IDX file.
    """


class CheckpointError(LobsterError):
    pass


class FullyPrunedError(LobsterError):
    """
    No alive, non-zero parameter left to derive a threshold from.
    """
