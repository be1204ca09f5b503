"""Exception hierarchy for prime_traffic.

Library code raises these; only the command-line entry point turns them into
exit codes and console output.
"""

from __future__ import annotations


class PrimeError(Exception):
    """Base class for every error raised by prime_traffic."""


class ShapeError(PrimeError, ValueError):
    """Raised when tensor shapes are incompatible.

    Attributes:
        expected: The expected shape (or width).
        actual: The shape (or width) that was received.
    """

    def __init__(self, message: str, expected=None, actual=None) -> None:
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class GradientError(PrimeError, RuntimeError):
    """Raised for non-finite gradients or a backward pass without a forward trace."""


class FreezeViolation(PrimeError, AssertionError):
    """Raised when a frozen parameter block changed during training."""


class PcapError(PrimeError, ValueError):
    """Raised for malformed capture files.

    Attributes:
        byte_offset: Offset in the capture where the problem was detected.
    """

    def __init__(self, message: str, byte_offset: int) -> None:
        super().__init__(f"{message} (at byte offset {byte_offset})")
        self.byte_offset = byte_offset


class UnsupportedFormatError(PcapError):
    """Raised when a capture does not start with a classic pcap magic number."""


class DegenerateMatrixError(PrimeError, ValueError):
    """Raised when every singular value of a matrix is below the retention threshold."""


class PreconditionError(PrimeError, ValueError):
    """Raised when an operation is called outside of its documented precondition."""


class ConfigError(PrimeError, ValueError):
    """Raised when a configuration is invalid.

    Attributes:
        problems: Every problem found, not only the first one.
    """

    def __init__(self, problems: list[str] | str) -> None:
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MetricsError(PrimeError, ValueError):
    """Raised for accuracy-matrix misuse (duplicate, missing or out-of-range cells)."""


class LabelConflictError(PrimeError, ValueError):
    """Raised when a labeling manifest assigns more than one class to a flow."""


class ScenarioMismatchError(PrimeError, ValueError):
    """Raised when run directories cannot be compared."""
