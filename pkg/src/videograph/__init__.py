"""Recursive language-guided spatiotemporal graph networks for video summarization."""

from videograph.engine import Parameter, Tape, Tensor, gradient_check

__all__ = ["Tensor", "Parameter", "Tape", "gradient_check"]
__version__ = "0.1.0"
