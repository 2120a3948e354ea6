"""Exception hierarchy shared across the toolkit."""


class HQPError(Exception):
    """Base class for every error raised by :mod:`hqp`."""


class ShapeError(HQPError, ValueError):
    """Tensor or layer dimensions do not line up."""


class TapeError(HQPError, RuntimeError):
    """Misuse of a :class:`~hqp.tensor.GradTape`."""


class NonFiniteGradientError(HQPError, FloatingPointError):
    def __init__(self, layer_index, message=None):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite gradient in layer {layer_index}")


class GraphError(HQPError, ValueError):
    """Structural problem with a model graph (orphan batch norm, bad wiring)."""


class PruningError(HQPError, ValueError):
    """Invalid pruning request."""


class ResidualGroupError(PruningError):
    """A residual group would be pruned only partially."""


class CalibrationError(HQPError, ValueError):
    """Quantization calibration could not be performed."""


class QuantizationError(HQPError, ValueError):
    """Invalid quantization request (e.g. quantizing twice)."""


class ModelFormatError(HQPError, IOError):
    """Base class for model file decoding problems."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class DatasetError(HQPError, ValueError):
    pass


class TrainingDivergedError(HQPError, FloatingPointError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")


class ConfigError(HQPError, ValueError):
    pass
