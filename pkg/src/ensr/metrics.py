"""Image quality metrics: PSNR, SSIM and the pixel-intensity accuracy curve."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ensr.errors import DimensionError, UsageError
from ensr.image_core import Image, is_quantized
from ensr.io import load_image

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LEVELS = 256


def _same_dims(a: Image, b: Image):
    if a.shape != b.shape:
        raise DimensionError(f"image dims differ: {a.shape} vs {b.shape}")


def psnr(test: Image, ref: Image) -> float:
    """Peak SNR in dB with the reference's declared peak; identical images give +inf."""
    _same_dims(test, ref)
    if not ref.intensity_max > 0:
        raise UsageError("reference intensity_max must be positive")
    mse = float(np.mean((test.data - ref.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(ref.intensity_max ** 2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a, taps):
    k = len(taps)
    rows = sliding_window_view(a, k, axis=0) @ taps
    return sliding_window_view(rows, k, axis=1) @ taps


def ssim_map(test: Image, ref: Image, window=SSIM_WINDOW, sigma=SSIM_SIGMA,
             k1=SSIM_K1, k2=SSIM_K2) -> np.ndarray:
    """Local SSIM over every fully contained window position."""
    _same_dims(test, ref)
    if min(test.shape) < window:
        raise DimensionError(f"SSIM needs at least {window}x{window}, got {test.shape}")
    taps = gaussian_window(window, sigma)
    x, y = test.data, ref.data
    c1 = (k1 * ref.intensity_max) ** 2
    c2 = (k2 * ref.intensity_max) ** 2
    mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mx * mx
    syy = _filter_valid(y * y, taps) - my * my
    sxy = _filter_valid(x * y, taps) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(test: Image, ref: Image, **kw) -> float:
    return float(np.mean(ssim_map(test, ref, **kw)))


@dataclass(frozen=True)
class AccuracyCurve:
    thresholds: np.ndarray
    accuracy: np.ndarray

    def at(self, t: int) -> float:
        return float(self.accuracy[int(t)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "accuracy"])
            for t, a in zip(self.thresholds, self.accuracy):
                w.writerow([int(t), repr(float(a))])


def _abs_diff_counts(test: Image, ref: Image) -> np.ndarray:
    _same_dims(test, ref)
    if not (is_quantized(test, LEVELS) and is_quantized(ref, LEVELS)):
        raise UsageError("accuracy curves need images quantized to integers in [0, 255]")
    diff = np.abs(test.data - ref.data).astype(np.int64)
    return np.bincount(diff.ravel(), minlength=LEVELS)


def _curve_from_counts(counts) -> AccuracyCurve:
    acc = np.cumsum(counts) / counts.sum()
    return AccuracyCurve(np.arange(LEVELS), acc)


def accuracy_curve(test: Image, ref: Image) -> AccuracyCurve:
    """Fraction of pixels with |test - ref| <= t for t = 0..255."""
    return _curve_from_counts(_abs_diff_counts(test, ref))


def to_8bit(img: Image, peak: float | None = None) -> Image:
    """Map [0, peak] onto integers 0..255 (peak defaults to the declared range)."""
    peak = img.intensity_max if peak is None else peak
    q = np.clip(np.rint(img.data / peak * (LEVELS - 1)), 0, LEVELS - 1)
    return Image(q, float(LEVELS - 1))


# ------------------------------------------------------------------ corpus summaries

@dataclass
class CorpusSummary:
    names: list
    psnr: np.ndarray
    ssim: np.ndarray
    pooled_curve: AccuracyCurve
    mean_curve: AccuracyCurve
    per_image_t5: list
    unmatched: list

    @staticmethod
    def _mean_std(v):
        finite = v[np.isfinite(v)]
        if len(finite) == 0:
            return (float(v[0]) if len(v) else math.nan), 0.0
        std = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
        return float(np.mean(finite)), std

    @property
    def psnr_mean_std(self):
        return self._mean_std(self.psnr)

    @property
    def ssim_mean_std(self):
        return self._mean_std(self.ssim)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "psnr", "ssim", "accuracy_t5"])
            for i, name in enumerate(self.names):
                w.writerow([name, repr(float(self.psnr[i])), repr(float(self.ssim[i])),
                            repr(self.per_image_t5[i])])
            pm, ps = self.psnr_mean_std
            sm, ss = self.ssim_mean_std
            w.writerow(["mean", repr(pm), repr(sm), repr(self.pooled_curve.at(5))])
            w.writerow(["std", repr(ps), repr(ss), ""])


def evaluate_pairs(pairs, names=None) -> CorpusSummary:
    """Metrics over (prediction, reference) image pairs."""
    pairs = list(pairs)
    if not pairs:
        raise UsageError("no image pairs to evaluate")
    names = list(names) if names is not None else [str(i) for i in range(len(pairs))]
    ps, ss, t5 = [], [], []
    pooled = np.zeros(LEVELS, dtype=np.int64)
    curves = []
    for pred, ref in pairs:
        ps.append(psnr(pred, ref))
        ss.append(ssim(pred, ref))
        counts = _abs_diff_counts(to_8bit(pred, ref.intensity_max), to_8bit(ref))
        pooled += counts
        c = _curve_from_counts(counts)
        curves.append(c.accuracy)
        t5.append(c.at(5))
    return CorpusSummary(names, np.array(ps), np.array(ss), _curve_from_counts(pooled),
                         AccuracyCurve(np.arange(LEVELS), np.mean(curves, axis=0)), t5, [])


def evaluate_corpus(pred_dir, ref_dir, intensity_max: float = 1.0) -> CorpusSummary:
    """Pair ``*.raw`` files by name; unmatched names are logged and skipped."""
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    preds = {p.name: p for p in sorted(pred_dir.glob("*.raw"))}
    refs = {p.name: p for p in sorted(ref_dir.glob("*.raw"))}
    common = sorted(preds.keys() & refs.keys())
    unmatched = sorted(preds.keys() ^ refs.keys())
    for name in unmatched:
        log.warning("no partner for %s; skipped", name)
    pairs = [(load_image(preds[n], intensity_max), load_image(refs[n], intensity_max))
             for n in common]
    summary = evaluate_pairs(pairs, [n[:-4] for n in common])
    summary.unmatched = unmatched
    return summary
