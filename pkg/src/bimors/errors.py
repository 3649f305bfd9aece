"""Exception taxonomy shared across the package.

Distinct error kinds exist so callers (and the CLI exit-code mapping) can
tell usage mistakes apart from corrupted inputs and broken invariants.
"""


class ShapeError(ValueError):
    """Tensor operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Autodiff contract violated (e.g. backward from a non-scalar)."""


class FormatError(ValueError):
    """On-disk container is malformed (bad magic, version, field)."""


class TruncationError(FormatError):
    """On-disk container ends before its declared contents."""


class ChecksumError(FormatError):
    """Stored checksum does not match the bytes on disk."""


class ValidationError(ValueError):
    """Record or manifest violates a declared dimension or invariant."""


class WeightsError(ValueError):
    """Weight container has missing, extra, or mis-shaped tensors."""


class SplitError(ValueError):
    """Split request cannot be satisfied by the dataset."""


class PromptLengthError(ValueError):
    """Assembled prompt would overflow the encoder context window."""


class ProtocolError(ValueError):
    """Evaluation/training protocol violated (label outside the split,
    regime/split mismatch, empty shared class list)."""
