"""
Exception types raised across echoinr
"""

from typing import Optional, Sequence


class EchoInrError(Exception):
    """Base class for all echoinr errors"""


class ShapeError(EchoInrError, ValueError):
    """Operand shapes do not conform"""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int], detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: shape mismatch {self.left} vs {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DomainError(EchoInrError, ValueError):
    """Input outside the domain of an operation"""


class NyquistError(DomainError):
    """Sampling grid too coarse for the requested wavelength"""

    def __init__(self, spacing: float, wavelength: float, what: str = "grid"):
        self.spacing = spacing
        self.wavelength = wavelength
        super().__init__(
            f"{what} spacing {spacing:.4g} mm exceeds lambda/2 = {wavelength / 2:.4g} mm; "
            f"oversample the grid (or upsample the map) so that spacing <= lambda/2"
        )


class ConfigError(EchoInrError, ValueError):
    """Invalid or unreadable configuration"""


class NumericalAbort(EchoInrError, RuntimeError):
    """A computation produced non-finite values"""

    def __init__(self, message: str, op: Optional[str] = None, iteration: Optional[int] = None):
        self.op = op
        self.iteration = iteration
        super().__init__(message)
