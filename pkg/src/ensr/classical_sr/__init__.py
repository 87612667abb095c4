"""The five processing algorithms that enlarge an LR image to HR size."""

from __future__ import annotations

from ensr.classical_sr.interp import bicubic_upscale, bilinear_upscale, nedi_upscale
from ensr.classical_sr.sparse import (
    AnchoredRegressors,
    Dictionary,
    FeatureOp,
    aplus_upscale,
    load_dictionary,
    omp,
    save_dictionary,
    sc_upscale,
    train_dictionary,
)
from ensr.errors import ConfigurationError
from ensr.image_core import Image, SRMethod
from ensr.kspace import zip_upscale

__all__ = [
    "AnchoredRegressors",
    "Dictionary",
    "FeatureOp",
    "aplus_upscale",
    "bicubic_upscale",
    "bilinear_upscale",
    "load_dictionary",
    "nedi_upscale",
    "omp",
    "process",
    "save_dictionary",
    "sc_upscale",
    "train_dictionary",
    "zip_upscale",
]


def process(method: SRMethod, lr: Image, dictionary: Dictionary | None = None,
            regressors: AnchoredRegressors | None = None, sparsity: int = 3) -> Image:
    """Enlarge ``lr`` to twice its size with one of the five processing algorithms."""
    method = SRMethod(method)
    if method is SRMethod.ZIP:
        return zip_upscale(lr)
    if method is SRMethod.BI:
        return bicubic_upscale(lr)
    if method is SRMethod.NEDI:
        return nedi_upscale(lr)
    if dictionary is None:
        raise ConfigurationError(f"{method.name} needs a trained dictionary")
    if method is SRMethod.SC:
        return sc_upscale(lr, dictionary, sparsity)
    if regressors is None:
        raise ConfigurationError("A+ needs anchored regressors")
    return aplus_upscale(lr, dictionary, regressors)
