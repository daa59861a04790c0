"""Exceptions raised by Metamorph."""
# This module shouldn't import anything to avoid circular imports!

from __future__ import annotations


class MetamorphError(Exception):
    """Base class for all errors raised by the package."""


# Volume I/O


class MalformedHeader(MetamorphError, ValueError):
    """File header could not be parsed (wrong magic bytes, bad dimensions)."""


class PayloadSizeMismatch(MetamorphError, ValueError):
    """Number of payload bytes does not match the header dimensions."""


class UnsupportedDtype(MetamorphError, ValueError):
    """Voxel data type is not one we read."""


class IoFailure(MetamorphError, OSError):
    """Reading or writing a file failed."""


class ConstantVolume(MetamorphError, ValueError):
    """Volume has no intensity range to normalize."""


class InvalidVolume(MetamorphError, ValueError):
    """Volume data, spacing or mask is unusable."""


# Phantoms and cohorts


class InvalidSpec(MetamorphError, ValueError):
    pass


class DuplicateSubject(MetamorphError, ValueError):
    pass


class ManifestMismatch(MetamorphError, ValueError):
    """Manifest does not pair every subject across the requested time points."""


# Patches, wavelets and tensors


class PatchTooLarge(MetamorphError, ValueError):
    pass


class GridMismatch(MetamorphError, ValueError):
    """Patches or volume do not match the patch grid."""


class OddDimension(MetamorphError, ValueError):
    pass


class BandShapeMismatch(MetamorphError, ValueError):
    pass


class ShapeMismatch(MetamorphError, ValueError):
    pass


class InvalidRange(MetamorphError, ValueError):
    """Network input is outside of the normalized intensity range."""


# Training and inference


class NonFiniteLoss(MetamorphError, ArithmeticError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class CheckpointMismatch(MetamorphError, ValueError):
    """Checkpoint does not fit the requested network."""


# Evaluation


class VolumeTooSmall(MetamorphError, ValueError):
    pass


class EmptyMask(MetamorphError, ValueError):
    """Mask leaves no voxel to score."""


class EmptyCohort(MetamorphError, ValueError):
    pass


# Command line


class UsageError(MetamorphError):
    """Invalid command line usage."""

    def __init__(self, message: str, help_text: str = ""):
        super().__init__(message)
        self.help_text = help_text


class InvalidConfig(MetamorphError, ValueError):
    """Configuration file or environment holds an unknown key or a bad value."""
