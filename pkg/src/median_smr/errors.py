"""Shared exception types."""


class MedianSmrError(Exception):
    """Base class for protocol and harness errors."""


class ConfigError(MedianSmrError):
    """Invalid or unknown configuration input."""


class SelectorValidityError(MedianSmrError):
    """A (k,l,f)-selector returned a value that was not among its arguments."""


class ChainGapError(MedianSmrError):
    """Client-side hash chain material for a command is missing."""


class MonotonicityViolation(MedianSmrError):
    """A server's committed sequence failed to remain a prefix of its later one.

    Carries a forensic dump describing the offending server and round.
    """

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump
