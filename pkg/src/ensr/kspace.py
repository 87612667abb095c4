"""Frequency-domain degradation and zero-filled (ZIP) upscaling.

Spectra are stored DC-centered (``fftshift`` layout) with unitary
normalization, so Parseval holds and "central" means a literal array-center
crop. Every resize applies an explicit amplitude correction so that a
constant image keeps its intensity.

For an even grid the centered band of a half-size grid spans frequencies
``-n/2 .. n/2``; the two Nyquist bins ``±n/2`` alias onto one bin of the
small grid. Downsampling folds them together, zero-filling splits the
small grid's Nyquist bin evenly between them. With this pairing
``downsample_kspace(zip_upscale(x)) == x`` exactly and both outputs are real
for real inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ensr.errors import DimensionError
from ensr.image_core import Image


@dataclass(frozen=True, eq=False)
class KSpaceGrid:
    data: np.ndarray
    norm: str = "ortho"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.complex128, copy=True)
        if arr.ndim != 2:
            raise DimensionError(f"k-space grid must be 2D, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _check_even(shape, what="image"):
    h, w = shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise DimensionError(f"{what} dims must be even and >= 2, got {h}x{w}")


def centered_fft2(a: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(a, norm="ortho"))


def centered_ifft2(k: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(k), norm="ortho")


def fft2(img: Image) -> KSpaceGrid:
    _check_even(img.shape)
    return KSpaceGrid(centered_fft2(img.data))


def ifft2(k: KSpaceGrid, intensity_max: float = 1.0, return_residual: bool = False):
    """Inverse transform; returns the real part (and optionally max |imag|)."""
    _check_even(k.data.shape, "k-space")
    out = centered_ifft2(k.data)
    img = Image(out.real, intensity_max)
    if return_residual:
        return img, float(np.max(np.abs(out.imag)))
    return img


def _crop_fold(spec: np.ndarray, h: int, w: int) -> np.ndarray:
    """Central band of a centered spectrum reduced to an h x w centered grid."""
    H, W = spec.shape
    r0, c0 = H // 2 - h // 2, W // 2 - w // 2
    band = spec[r0:r0 + h + 1, c0:c0 + w + 1].copy()
    band[0, :] += band[h, :]
    band[:, 0] += band[:, w]
    return band[:h, :w]


def _split_embed(spec: np.ndarray, H: int, W: int) -> np.ndarray:
    """Embed an h x w centered spectrum in a zero H x W grid, splitting Nyquist bins."""
    h, w = spec.shape
    band = np.zeros((h + 1, w + 1), dtype=np.complex128)
    band[:h, :w] = spec
    band[0, :] *= 0.5
    band[h, :] = band[0, :]
    band[:, 0] *= 0.5
    band[:, w] = band[:, 0]
    out = np.zeros((H, W), dtype=np.complex128)
    r0, c0 = H // 2 - h // 2, W // 2 - w // 2
    out[r0:r0 + h + 1, c0:c0 + w + 1] = band
    return out


def downsample_kspace(hr: Image) -> Image:
    """Keep the central quarter of k-space and return the half-size image."""
    H, W = hr.shape
    if H % 4 or W % 4:
        raise DimensionError(f"downsampling needs dims divisible by 4, got {H}x{W}")
    h, w = H // 2, W // 2
    small = _crop_fold(centered_fft2(hr.data), h, w)
    # unitary norm: a constant's DC scales with sqrt(pixel count)
    small *= np.sqrt((h * w) / (H * W))
    return Image(centered_ifft2(small).real, hr.intensity_max)


def zip_upscale(lr: Image, target_dims: tuple[int, int] | None = None) -> Image:
    """Zero-filled k-space interpolation to twice the input size."""
    h, w = lr.shape
    _check_even((h, w))
    H, W = (2 * h, 2 * w) if target_dims is None else tuple(target_dims)
    if (H, W) != (2 * h, 2 * w):
        raise DimensionError(f"ZIP target {H}x{W} must be twice the input {h}x{w}")
    big = _split_embed(centered_fft2(lr.data), H, W)
    big *= np.sqrt((H * W) / (h * w))
    return Image(centered_ifft2(big).real, lr.intensity_max)
