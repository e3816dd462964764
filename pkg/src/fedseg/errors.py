"""Exception types shared across the package."""

from __future__ import annotations


class FedsegError(Exception):
    """Base class for every package-specific failure."""


class ShapeMismatchError(FedsegError, ValueError):
    """Two operands that must agree in shape do not."""

    def __init__(self, expected, actual, context: str = ""):
        self.expected = expected
        self.actual = actual
        where = f" in {context}" if context else ""
        super().__init__(f"shape mismatch{where}: expected {expected}, got {actual}")


class InvalidWeightsError(FedsegError, ValueError):
    """Empty, negative, or all-zero aggregation weights."""


class InvalidMaskError(FedsegError, ValueError):
    """Mask or probability tensor violates its value-range contract."""


class EmptyVolumeError(FedsegError, ValueError):
    """Volume is all zero, so zero-plane cropping has nothing to keep."""


class ZeroVarianceError(FedsegError, ValueError):
    """A channel has too few nonzero voxels or zero spread to normalize."""


class PatchError(FedsegError, ValueError):
    """Requested patch does not fit inside the volume, or is not cubic."""


class EmptyDatasetError(FedsegError, ValueError):
    """An operation requiring at least one (or two) cases received fewer."""


class ConfigError(FedsegError, ValueError):
    """Experiment configuration failed validation."""


class IllegalTransitionError(FedsegError, RuntimeError):
    """A collaborator attempted a phase transition outside the legal set."""


class StaleRoundError(FedsegError, RuntimeError):
    """A submission arrived for a round that is not the open one."""


class DuplicateSubmissionError(FedsegError, RuntimeError):
    """A site tried to submit twice within one round."""


class NoScoresError(FedsegError, ValueError):
    """Selection or interpolation was asked to run with no scores at all."""


class ProtocolError(FedsegError, ValueError):
    """Base class for wire-format violations."""


class BadMagicError(ProtocolError):
    """Frame does not start with the protocol magic."""


class UnsupportedVersionError(ProtocolError):
    """Frame carries a protocol version this build does not speak."""


class TruncatedFrameError(ProtocolError):
    """Frame shorter than its header or declared payload length."""


class OversizedPayloadError(ProtocolError):
    """Declared payload length exceeds the configured cap."""


class MissingFilesError(FedsegError, FileNotFoundError):
    """Report generation could not find required run artifacts."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing run files: " + ", ".join(str(m) for m in self.missing))
