"""Image and patch value types shared by every pipeline stage."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from ensr.errors import DimensionError


class SRMethod(enum.IntEnum):
    """The five processing algorithms. Member order fixes channel order downstream."""

    ZIP = 1
    BI = 2
    NEDI = 3
    SC = 4
    APLUS = 5

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "SRMethod":
        key = text.strip().upper().replace("+", "PLUS")
        if key == "A":
            key = "APLUS"
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown SR method {text!r}; expected one of "
                             f"{[m.slug for m in cls]}") from None


@dataclass(frozen=True, eq=False)
class Image:
    """A real-valued 2D intensity grid with a declared dynamic range.

    ``data`` is stored as a read-only float64 array of shape (height, width).
    """

    data: np.ndarray
    intensity_max: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise DimensionError(f"image data must be 2D, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError("image must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image intensities must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "intensity_max", float(self.intensity_max))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data) -> "Image":
        return Image(data, self.intensity_max)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (self.intensity_max == other.intensity_max
                and self.shape == other.shape
                and np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self):
        return f"Image({self.height}x{self.width}, intensity_max={self.intensity_max})"


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patch_size: int
    stride: int
    patches: tuple[Image, ...]
    source_dims: tuple[int, int]
    origin_offsets: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if len(self.patches) != len(self.origin_offsets):
            raise DimensionError("patch count and offset count differ")
        h, w = self.source_dims
        p = self.patch_size
        for img, (r, c) in zip(self.patches, self.origin_offsets):
            if img.shape != (p, p):
                raise DimensionError(f"patch of shape {img.shape} in a {p}x{p} grid")
            if r < 0 or c < 0 or r + p > h or c + p > w:
                raise DimensionError(f"patch offset {(r, c)} outside source {h}x{w}")
            if r % self.stride or c % self.stride:
                raise DimensionError(f"offset {(r, c)} not on the stride-{self.stride} grid")

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w = self.source_dims
        return (h - self.patch_size) // self.stride + 1, (w - self.patch_size) // self.stride + 1

    def as_array(self) -> np.ndarray:
        """Stack patches into an (n, p, p) array."""
        return np.stack([p.data for p in self.patches])


def patch_offsets(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Row-major patch origins of a regular grid; raises on a non-dividing stride."""
    if patch_size < 1 or stride < 1:
        raise DimensionError("patch_size and stride must be positive")
    if patch_size > min(height, width):
        raise DimensionError(f"patch_size {patch_size} exceeds image {height}x{width}")
    for axis, extent in (("height", height), ("width", width)):
        if (extent - patch_size) % stride:
            raise DimensionError(
                f"{axis}: ({extent} - {patch_size}) is not divisible by stride {stride}")
    rows = range(0, height - patch_size + 1, stride)
    cols = range(0, width - patch_size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def patchify(img: Image, patch_size: int, stride: int) -> PatchGrid:
    offsets = patch_offsets(img.height, img.width, patch_size, stride)
    patches = tuple(
        Image(img.data[r:r + patch_size, c:c + patch_size], img.intensity_max)
        for r, c in offsets)
    return PatchGrid(patch_size, stride, patches, img.shape, tuple(offsets))


def stitch(patches: np.ndarray, offsets, source_dims) -> np.ndarray:
    """Uniform-weight overlap averaging of (n, p, p) patches into a 2D array."""
    patches = np.asarray(patches, dtype=np.float64)
    p = patches.shape[-1]
    acc = np.zeros(source_dims)
    weight = np.zeros(source_dims)
    for patch, (r, c) in zip(patches, offsets):
        acc[r:r + p, c:c + p] += patch
        weight[r:r + p, c:c + p] += 1.0
    if np.any(weight == 0):
        raise DimensionError("patches do not cover the source image")
    return acc / weight


def unpatchify(pg: PatchGrid) -> Image:
    if not pg.patches:
        raise DimensionError("empty patch grid")
    intensity_max = pg.patches[0].intensity_max
    return Image(stitch(pg.as_array(), pg.origin_offsets, pg.source_dims), intensity_max)


class DegenerateQuantization(UserWarning):
    """Quantizing a constant image; every pixel maps to 0."""


def quantize(img: Image, levels: int = 256) -> Image:
    """Affinely map [min, max] onto [0, levels - 1] and round to integers."""
    top = levels - 1
    lo, hi = float(img.data.min()), float(img.data.max())
    if hi == lo:
        warnings.warn("constant image quantized to all zeros", DegenerateQuantization,
                      stacklevel=2)
        return Image(np.zeros(img.shape), float(top))
    scaled = (img.data - lo) / (hi - lo) * top
    return Image(np.clip(np.rint(scaled), 0, top), float(top))


def is_quantized(img: Image, levels: int = 256) -> bool:
    d = img.data
    return bool(np.all(d == np.rint(d)) and d.min() >= 0 and d.max() <= levels - 1)
