"""taskforge: compositional visual in-context learning data engine."""

__version__ = "0.1.0"

from .core import DatasetRecord, ImageRaster, Palette, SegMap
from .rng import RngState

__all__ = ["DatasetRecord", "ImageRaster", "Palette", "SegMap", "RngState", "__version__"]
