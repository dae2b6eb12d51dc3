"""Dataset-level image statistics and their correlation with downstream scores."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .imageio import read_pnm

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
PROPERTIES = ("color_entropy", "brightness_entropy", "mean_tv", "mean_edge_density")


class ShapeError(ValueError):
    pass


class CorrelationError(ValueError):
    """Pearson r is undefined (constant input)."""


class JoinError(KeyError):
    pass


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.size == 0:
        raise ShapeError(f"expected a C x H x W image, got shape {img.shape}")
    return img


def to_gray(img):
    img = _as_chw(img)
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] == 3:
        r, g, b = GRAY_WEIGHTS
        return r * img[0] + g * img[1] + b * img[2]
    raise ShapeError(f"cannot convert {img.shape[0]} channels to grayscale")


def histogram_entropy(values, bins=256):
    """Entropy in bits of an equal-width histogram over [0, 1]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    p = counts[counts > 0] / v.size
    return float(max(0.0, -(p * np.log2(p)).sum()))


def color_entropy(img, bins=256):
    """Mean over R, G, B of the per-channel histogram entropy."""
    img = _as_chw(img)
    if img.shape[0] != 3:
        raise ShapeError(f"color entropy needs 3 channels, got {img.shape[0]}")
    return float(np.mean([histogram_entropy(ch, bins) for ch in img]))


def brightness_entropy(img, bins=256):
    return histogram_entropy(to_gray(img), bins)


def total_variation(img):
    """Anisotropic TV divided by C*H*W."""
    img = _as_chw(img)
    c, h, w = img.shape
    if h < 2 or w < 2:
        raise ShapeError(f"total variation needs H, W >= 2, got {h}x{w}")
    tv = np.abs(np.diff(img, axis=2)).sum() + np.abs(np.diff(img, axis=1)).sum()
    return float(tv / (c * h * w))


# ---------------------------------------------------------------------------
# Canny
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.4
    kernel_size: int = 5
    low: float = 0.1
    high: float = 0.2

    def validate(self):
        if not self.sigma > 0:
            raise ValueError(f"gaussian sigma must be positive, got {self.sigma}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        if not 0.0 <= self.low < self.high <= 1.0:
            raise ValueError(f"thresholds must satisfy 0 <= low < high <= 1, got {self.low}, {self.high}")


# grayscale is snapped to a 2**-24 grid and centered, which turns 1 - img into an
# exact sign flip all the way through the (linear) blur and Sobel stages
_GRID = float(2 ** 24)
_SOBEL_MAX = 4.0 * math.sqrt(2.0)
_TAN_22_5 = math.sqrt(2.0) - 1.0


def gaussian_kernel(sigma, size):
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _correlate(plane, kernel):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(plane, ((ph, ph), (pw, pw)), mode="edge")
    h, w = plane.shape
    out = np.zeros_like(plane)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def gradient_sectors(gx, gy):
    """Quantize gradient direction into 0 (horizontal), 1 (45 deg), 2 (vertical), 3 (135 deg)."""
    ax, ay = np.abs(gx), np.abs(gy)
    sector = np.where(gx * gy > 0, 1, 3)
    sector = np.where(ay <= _TAN_22_5 * ax, 0, sector)
    sector = np.where(ax <= _TAN_22_5 * ay, 2, sector)
    sector = np.where((ax == 0) & (ay == 0), 0, sector)
    return sector.astype(np.int64)


def canny(img, params=CannyParams()):
    """Boolean edge map: blur, Sobel, NMS over 4 directions, 8-connected hysteresis.

    Thresholds apply to the Sobel magnitude divided by its largest attainable
    value on [0, 1] input (4 * sqrt(2)).
    """
    params.validate()
    gray = to_gray(img)
    q = np.rint(np.clip(gray, 0.0, 1.0) * _GRID) - _GRID / 2
    blurred = _correlate(q, gaussian_kernel(params.sigma, params.kernel_size))
    gx = _correlate(blurred, SOBEL_X)
    gy = _correlate(blurred, SOBEL_Y)
    mag = np.hypot(gx, gy) / (_SOBEL_MAX * _GRID)
    thin = kernels.non_max_suppression(mag, gradient_sectors(gx, gy))
    return kernels.hysteresis(thin >= params.high, thin >= params.low)


def edge_density(img, params=CannyParams()):
    edges = canny(img, params)
    return float(np.count_nonzero(edges)) / edges.size


# ---------------------------------------------------------------------------
# dataset statistics and correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    color_entropy_bits: float
    brightness_entropy_bits: float
    mean_total_variation: float
    mean_edge_density: float
    sample_count: int

    def values(self):
        return (self.color_entropy_bits, self.brightness_entropy_bits,
                self.mean_total_variation, self.mean_edge_density)


def image_stats(img, bins=256, canny_params=CannyParams()):
    """(color entropy, brightness entropy, TV, edge density) for one image.

    Single-channel images report their own histogram entropy as color entropy.
    """
    img = _as_chw(img)
    ce = color_entropy(img, bins) if img.shape[0] == 3 else histogram_entropy(img[0], bins)
    return (ce, brightness_entropy(img, bins), total_variation(img), edge_density(img, canny_params))


def aggregate_stats(per_image):
    """Exactly rounded means, independent of image order."""
    per_image = list(per_image)
    if not per_image:
        raise ValueError("no images to aggregate")
    n = len(per_image)
    means = [math.fsum(col) / n for col in zip(*per_image)]
    return DatasetStats(*means, sample_count=n)


def dataset_stats(manifest, bins=256, canny_params=CannyParams()):
    rows = []
    for path in manifest.paths():
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset image: {path}")
        rows.append(image_stats(read_pnm(path), bins, canny_params))
    return aggregate_stats(rows)


def pearson_r(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson_r needs at least 2 pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise CorrelationError("correlation undefined for a constant sequence")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class CorrelationReport:
    properties: tuple
    r: dict
    rows: list  # (dataset, DatasetStats, score)

    def to_csv(self):
        lines = ["dataset," + ",".join(PROPERTIES) + ",score"]
        for name, stats, score in self.rows:
            vals = ",".join(f"{v:.6f}" for v in stats.values())
            lines.append(f"{name},{vals},{score:.6f}")
        lines.append("r," + ",".join(f"{self.r[p]:.6f}" for p in self.properties) + ",")
        return "\n".join(lines) + "\n"


def stats_csv(named_stats):
    lines = ["dataset," + ",".join(PROPERTIES) + ",sample_count"]
    for name, stats in named_stats:
        lines.append(f"{name}," + ",".join(f"{v:.6f}" for v in stats.values()) + f",{stats.sample_count}")
    return "\n".join(lines) + "\n"


def correlation_report(stats, scores, csv_path=None):
    """Pearson r of each property against the downstream score, joined by dataset name."""
    stats = dict(stats)
    scores = dict(scores)
    missing = sorted(set(stats) ^ set(scores))
    if missing:
        raise JoinError(f"dataset names do not match; unmatched: {', '.join(missing)}")
    if len(stats) < 3:
        raise ValueError("correlation report needs at least 3 datasets")
    names = sorted(stats)
    y = [scores[n] for n in names]
    r = {}
    for i, prop in enumerate(PROPERTIES):
        r[prop] = pearson_r([stats[n].values()[i] for n in names], y)
    report = CorrelationReport(PROPERTIES, r, [(n, stats[n], scores[n]) for n in names])
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_csv())
    return report
