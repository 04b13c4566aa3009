"""Exception types shared across the pipeline."""


class SegbedError(Exception):
    """Base class for all package errors."""


class UnsupportedFormat(SegbedError):
    pass


class EmptyAudio(SegbedError):
    pass


class CenterOutOfRange(SegbedError):
    pass


class ShapeMismatch(SegbedError, ValueError):
    pass


class TooFewBeats(SegbedError):
    pass


class IndexOutOfRange(SegbedError, IndexError):
    pass


class CorruptManifest(SegbedError):
    pass


class EmptyNegativeRegion(SegbedError):
    pass


class NonFiniteLoss(SegbedError, FloatingPointError):
    pass


class EmptyDataset(SegbedError):
    pass


class ChecksumMismatch(SegbedError):
    pass


class ArchMismatch(SegbedError):
    pass


class ParseError(SegbedError, ValueError):
    pass


class OverlapError(ParseError):
    pass


class GapError(ParseError):
    pass


class ConfigError(SegbedError, ValueError):
    pass
