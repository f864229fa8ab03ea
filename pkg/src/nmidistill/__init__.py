"""Attention-pattern analysis and NMI-guided attention distillation at desk scale."""

from nmidistill.errors import CodecError, DivergenceError, NumericError

__version__ = "0.1.0"

__all__ = ["CodecError", "DivergenceError", "NumericError", "__version__"]
