import typing as t


class KforgeError(Exception):
    """
    Base class for every error raised by kforge
    """

    pass


class ConfigValidationError(KforgeError):
    """
    Raised when there is a mismatch with the required configuration parameters
    """

    pass


class ShapeError(KforgeError):
    """
    Raised when tensor extents do not line up with what an operation expects
    """

    pass


class GradientError(KforgeError):
    """
    Raised when a backward pass is requested on something it cannot differentiate
    """

    pass


class NonFiniteError(KforgeError):
    """
    Raised when NaN or Inf shows up, carrying the chain of ops that produced it
    """

    def __init__(self, message: str, op_path: t.Optional[t.List[str]] = None):
        self.op_path = list(op_path or [])
        if self.op_path:
            message = f"{message} (op path: {' <- '.join(self.op_path)})"
        super().__init__(message)


class GraphDefinitionError(KforgeError):
    """
    Raised when a skeleton or pyramid definition table is inconsistent
    """

    pass


class SkeletonParseError(KforgeError):
    """
    Raised when a skeleton text file does not follow the expected layout
    """

    def __init__(self, message: str, frame_index: t.Optional[int] = None):
        self.frame_index = frame_index
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)


class SequenceSchemaError(KforgeError):
    """
    Raised when an exported sequence does not match the sequence schema
    """

    def __init__(self, message: str, field: t.Optional[str] = None):
        self.field = field
        if field is not None:
            message = f"field '{field}': {message}"
        super().__init__(message)


class DatasetError(KforgeError):
    """
    Raised when a dataset directory is missing, is not a directory or holds no matching files
    """

    pass


class CheckpointError(KforgeError):
    pass


class DivergenceError(KforgeError):
    """
    Raised when adversarial training blows up (NaN or runaway critic loss)
    """

    pass


class MetricError(KforgeError):
    pass


class InvalidClassError(KforgeError):
    """
    Raised when a class id is outside the model's or dataset's class range
    """

    pass
