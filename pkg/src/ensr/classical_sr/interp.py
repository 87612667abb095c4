"""Interpolation upscalers: bicubic convolution and new edge-directed interpolation.

All 2x upscalers here use the sampling alignment of the k-space degradation:
HR pixel (2i, 2j) sits on LR pixel (i, j).
"""

from __future__ import annotations

import numpy as np

from ensr.errors import DimensionError
from ensr.image_core import Image

KEYS_A = -0.5
NEDI_COND_LIMIT = 1e8
NEDI_PAD = 8

# step 1: targets at odd/odd HR sites, interpolated from their 4 diagonal LR neighbours
_DIAG = np.array([(-1, -1), (-1, 1), (1, -1), (1, 1)])
# step 2: remaining sites, interpolated from their 4 axial neighbours
_AXIAL = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])
# training samples: an 8x8 block of LR pixels around an odd/odd target
_DIAG_TRAIN = np.array([(2 * a + 1, 2 * b + 1) for a in range(-4, 4) for b in range(-4, 4)])
# training samples on the quincunx lattice around an axial target
_AXIAL_TRAIN = np.array([(a, b) for a in range(-3, 4) for b in range(-3, 4) if (a + b) % 2])


def keys_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def cubic_matrix(n: int, factor: int = 2, a: float = KEYS_A) -> np.ndarray:
    """(factor*n, n) cubic-convolution resampling matrix with clamped edges."""
    out = np.arange(factor * n)
    src = out / factor
    base = np.floor(src).astype(int)
    m = np.zeros((factor * n, n))
    for k in range(-1, 3):
        idx = base + k
        w = keys_kernel(src - idx, a)
        np.add.at(m, (out, np.clip(idx, 0, n - 1)), w)
    return m


def linear_matrix(n: int, factor: int = 2) -> np.ndarray:
    out = np.arange(factor * n)
    src = out / factor
    base = np.floor(src).astype(int)
    frac = src - base
    m = np.zeros((factor * n, n))
    np.add.at(m, (out, np.clip(base, 0, n - 1)), 1 - frac)
    np.add.at(m, (out, np.clip(base + 1, 0, n - 1)), frac)
    return m


def bicubic_upscale(lr: Image, factor: int = 2) -> Image:
    """Keys cubic convolution (a = -0.5), separable, replicated borders."""
    h, w = lr.shape
    if h < 4 or w < 4:
        raise DimensionError(f"bicubic needs at least 4x4 input, got {h}x{w}")
    out = cubic_matrix(h, factor) @ lr.data @ cubic_matrix(w, factor).T
    return lr.with_data(out)


def bilinear_upscale(lr: Image, factor: int = 2) -> Image:
    h, w = lr.shape
    return lr.with_data(linear_matrix(h, factor) @ lr.data @ linear_matrix(w, factor).T)


def _nedi_pass(grid, rows, cols, train, taps, cond_limit):
    """Covariance-based 4-tap interpolation of grid[rows, cols] in place.

    Returns a boolean mask of targets that fell back to the neighbour mean.
    """
    r = rows[:, None] + train[None, :, 0]
    c = cols[:, None] + train[None, :, 1]
    y = grid[r, c]
    C = grid[r[:, :, None] + 2 * taps[None, None, :, 0], c[:, :, None] + 2 * taps[None, None, :, 1]]
    A = np.einsum("nmk,nml->nkl", C, C)
    b = np.einsum("nmk,nm->nk", C, y)
    nb = grid[rows[:, None] + taps[None, :, 0], cols[:, None] + taps[None, :, 1]]

    s = np.linalg.svd(A, compute_uv=False)
    ill = ~(s[:, -1] * cond_limit > s[:, 0])
    vals = nb.mean(axis=1)
    ok = ~ill
    if np.any(ok):
        alpha = np.linalg.solve(A[ok], b[ok][:, :, None])[:, :, 0]
        est = np.einsum("nk,nk->n", alpha, nb[ok])
        vals[ok] = np.clip(est, nb[ok].min(axis=1), nb[ok].max(axis=1))
    grid[rows, cols] = vals
    return ill


def nedi_upscale(lr: Image, factor: int = 2, cond_limit: float = NEDI_COND_LIMIT,
                 return_fallback: bool = False):
    """Two-pass new edge-directed interpolation.

    Each new pixel is a 4-tap combination of its neighbours with weights fit by
    least squares over a local training window (geometric duality). Targets
    whose normal equations exceed ``cond_limit`` use the plain neighbour mean,
    which equals bilinear interpolation. Estimates are clipped to the range of
    their four neighbours.
    """
    if factor != 2:
        raise ValueError("NEDI supports factor 2 only")
    h, w = lr.shape
    if h < 8 or w < 8:
        raise DimensionError(f"NEDI needs at least 8x8 input, got {h}x{w}")
    P = NEDI_PAD
    padded = np.pad(lr.data, P, mode="edge")
    grid = linear_matrix(padded.shape[0]) @ padded @ linear_matrix(padded.shape[1]).T
    H, W = grid.shape

    lo, hi = 9, H - 10
    rr, cc = np.meshgrid(np.arange(lo, hi + 1), np.arange(9, W - 9), indexing="ij")
    sel = (rr % 2 == 1) & (cc % 2 == 1)
    fb1 = _nedi_pass(grid, rr[sel], cc[sel], _DIAG_TRAIN, _DIAG, cond_limit)

    rr, cc = np.meshgrid(np.arange(14, H - 14), np.arange(14, W - 14), indexing="ij")
    sel = (rr + cc) % 2 == 1
    fb2 = _nedi_pass(grid, rr[sel], cc[sel], _AXIAL_TRAIN, _AXIAL, cond_limit)

    out = lr.with_data(grid[2 * P:2 * P + 2 * h, 2 * P:2 * P + 2 * w])
    if return_fallback:
        return out, float(np.concatenate([fb1, fb2]).mean())
    return out
