"""Exception hierarchy.

Every error maps onto one of three CLI exit codes through its base class:
``ConfigError`` -> 2, ``DataError`` -> 3, ``NumericError`` -> 4.
"""


class OTNError(Exception):
    exit_code = 1


class ConfigError(OTNError, ValueError):
    exit_code = 2


class DataError(OTNError, ValueError):
    exit_code = 3


class NumericError(OTNError, ArithmeticError):
    exit_code = 4


# event_stream
class MalformedRow(DataError):
    pass


class OutOfBounds(DataError):
    pass


class OverlappingWindows(ConfigError):
    pass


class TooFewFrames(DataError):
    pass


# rwkv_core / otn_fusion
class IndivisibleGeometry(ConfigError):
    pass


class BadChannelCount(ConfigError):
    pass


class ShapeMismatch(DataError):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class BadTargetCount(ConfigError):
    pass


class UnknownStrategy(ConfigError):
    pass


class NonFiniteGradient(NumericError):
    pass


# par_head_metrics
class EmptyEvaluation(DataError):
    pass


# data_harness
class MissingAttributeFile(DataError):
    pass


class LabelLengthMismatch(DataError):
    pass


class MissingSampleAsset(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


# train_eval
class BadConfig(ConfigError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, batch_index, value):
        super().__init__(f"non-finite loss {value!r} at batch {batch_index}")
        self.batch_index = batch_index


class GeometryMismatch(DataError):
    pass
