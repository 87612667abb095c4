"""Ensemble MRI super-resolution from complementary classical priors."""

from ensr.errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    TrainingDiverged,
    UsageError,
)
from ensr.image_core import Image, PatchGrid, SRMethod, patchify, quantize, unpatchify

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "Image",
    "PatchGrid",
    "SRMethod",
    "TrainingDiverged",
    "UsageError",
    "patchify",
    "quantize",
    "unpatchify",
]

__version__ = "0.1.0"
