"""Attention-based multiple-instance learning for whole-slide images."""
from .store import MILB_VERSION

__version__ = "0.1.0"
MILW_VERSION = 1

__all__ = ["__version__", "MILB_VERSION", "MILW_VERSION"]
