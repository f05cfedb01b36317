"""Synthetic multi-scale blob dataset.

Each image carries K axis-aligned Gaussian blobs on a noisy background. A blob's
scale picks the single pyramid level whose heatmap marks it: small -> P2,
medium -> P3, large -> P4 (P5 targets stay empty). Blob centres sit on level-pixel
centres, so each level heatmap peaks at exactly 1.0 on its own blobs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..pyramid import LEVELS, STRIDES

SCALE_LEVEL = {"small": 2, "medium": 3, "large": 4}
SCALES = tuple(SCALE_LEVEL)
LEVEL_SIGMA = 0.75  # blob width in level pixels; image sigma is this times the stride
MIN_SPACING = 2  # Chebyshev distance between same-level peaks, keeps every peak a strict maximum
NOISE_STD = 0.1
MAX_BLOBS = 3


@dataclass
class Blob:
    scale: str
    level: int
    row: int  # level-pixel coordinates of the peak
    col: int
    amplitude: float


@dataclass
class SyntheticSample:
    image: np.ndarray  # (1, 3, H, W)
    targets: dict[int, np.ndarray]  # level -> (1, 1, H/stride, W/stride), values in [0, 1]
    blobs: list[Blob] = field(default_factory=list)

    def peaks(self, level: int) -> list[tuple[int, int]]:
        return [(b.row, b.col) for b in self.blobs if b.level == level]


def _gaussian(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    y = np.arange(h, dtype=np.float64)[:, None]
    x = np.arange(w, dtype=np.float64)[None, :]
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma * sigma))


def _free_cells(taken: list[tuple[int, int]], size: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(size) for j in range(size)
            if all(max(abs(i - a), abs(j - b)) >= MIN_SPACING for a, b in taken)]


def make_sample(rng: np.random.Generator, image_size: int) -> SyntheticSample:
    stride = dict(zip(LEVELS, STRIDES))
    k = int(rng.integers(1, MAX_BLOBS + 1))
    blobs: list[Blob] = []
    while len(blobs) < k:
        scale = SCALES[int(rng.integers(len(SCALES)))]
        level = SCALE_LEVEL[scale]
        free = _free_cells([(b.row, b.col) for b in blobs if b.level == level], image_size // stride[level])
        if not free:  # level is full; draw the scale again
            continue
        row, col = free[int(rng.integers(len(free)))]
        blobs.append(Blob(scale, level, row, col, float(rng.uniform(0.5, 1.0))))

    image = NOISE_STD * rng.standard_normal((1, 3, image_size, image_size))
    for b in blobs:
        s = stride[b.level]
        # level pixel (row, col) covers image pixels [row*s, (row+1)*s); its centre is (row + 0.5) * s - 0.5
        g = _gaussian(image_size, image_size, (b.row + 0.5) * s - 0.5, (b.col + 0.5) * s - 0.5, LEVEL_SIGMA * s)
        image[0] += b.amplitude * g

    targets = {}
    for lvl in LEVELS:
        n = image_size // stride[lvl]
        t = np.zeros((n, n))
        for b in blobs:
            if b.level == lvl:
                t = np.maximum(t, _gaussian(n, n, b.row, b.col, LEVEL_SIGMA))
        targets[lvl] = t.reshape(1, 1, n, n)
    return SyntheticSample(image, targets, blobs)


def gen_dataset(seed: int, count: int, image_size: int) -> list[SyntheticSample]:
    """Deterministic for a fixed seed; every blob scale is drawn with probability 1/3."""
    if image_size <= 0 or image_size % 32:
        raise ConfigError(f"image_size must be a positive multiple of 32, got {image_size}")
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    rng = np.random.default_rng(seed)
    return [make_sample(rng, image_size) for _ in range(count)]


def local_maxima(heatmap: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Top-``k`` cells that are >= all 8 neighbours, strongest first."""
    h = np.asarray(heatmap).reshape(heatmap.shape[-2:])
    padded = np.pad(h, 1, constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    is_max = h >= windows.max(axis=(2, 3))
    rows, cols = np.nonzero(is_max)
    order = np.argsort(-h[rows, cols], kind="stable")[:k]
    return [(int(rows[i]), int(cols[i])) for i in order]


def strict_peaks(heatmap: np.ndarray) -> list[tuple[int, int]]:
    """Cells strictly greater than all 8 neighbours."""
    h = np.asarray(heatmap).reshape(heatmap.shape[-2:])
    padded = np.pad(h, 1, constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3)).reshape(*h.shape, 9)
    neighbours = np.delete(windows, 4, axis=2)
    rows, cols = np.nonzero(h > neighbours.max(axis=2))
    return sorted(zip(rows.tolist(), cols.tolist()))
