"""Exception hierarchy shared by every deepminer module."""


class DeepMinerError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DeepMinerError, ValueError):
    pass


class BroadcastError(ShapeMismatch):
    pass


class NonFiniteInput(DeepMinerError, ValueError):
    """Raised when NaN or Inf shows up at an op boundary."""


class DomainError(DeepMinerError, ValueError):
    pass


class InvalidHyperparam(DeepMinerError, ValueError):
    pass


class AxisOutOfRange(DeepMinerError, IndexError):
    pass


class InvalidPermutation(DeepMinerError, ValueError):
    pass


class TapeError(DeepMinerError, RuntimeError):
    pass


class NonScalarLoss(TapeError):
    pass


class TapeConsumed(TapeError):
    pass


class EmptyTape(TapeError):
    pass


class DegenerateBatch(DeepMinerError, ValueError):
    pass


class ChannelNotDivisible(DeepMinerError, ValueError):
    pass


class InvalidThreshold(DeepMinerError, ValueError):
    pass


class ConfigInvalid(DeepMinerError, ValueError):
    pass


class IndivisibleHeight(DeepMinerError, ValueError):
    pass


class IndexOutOfRange(DeepMinerError, IndexError):
    pass


class FormatError(DeepMinerError, ValueError):
    pass


class EmptyGallery(DeepMinerError, ValueError):
    pass


class InvalidCount(DeepMinerError, ValueError):
    pass


class NoValidFiles(DeepMinerError, FileNotFoundError):
    pass


class DecodeError(DeepMinerError, ValueError):
    pass


class TooFewIdentities(DeepMinerError, ValueError):
    pass


class TrainingAborted(DeepMinerError, RuntimeError):
    """A non-finite value appeared during training; the message names the branch and term."""
