"""Fixed-size features from backbone-shaped volumes.

Volumes are channels-last: ``T' x H' x W' x C``. Boxes are in input-pixel
coordinates; ``spatial_scale`` maps pixels to feature cells (1/16 for the
reference backbone, whose 224 x 224 input gives a 14 x 14 map).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SPATIAL_SCALE = 1.0 / 16.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def clip(self, width: float, height: float) -> "Box":
        """Clamp to ``[0, width] x [0, height]``; a box fully outside collapses onto the border."""
        def c(v, hi):
            return min(max(v, 0.0), hi)
        return Box(c(self.x1, width), c(self.y1, height), c(self.x2, width), c(self.y2, height))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class FeatureMap:
    data: np.ndarray
    spatial_scale: float = DEFAULT_SPATIAL_SCALE

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"feature volume must be T' x H' x W' x C, got {self.data.shape}")
        if self.spatial_scale <= 0:
            raise ValueError("spatial_scale must be positive")

    @property
    def image_size(self) -> tuple[float, float]:
        """(width, height) of the input crop in pixels."""
        _, h, w, _ = self.data.shape
        return w / self.spatial_scale, h / self.spatial_scale


def temporal_avg_pool(volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume)
    if volume.ndim != 4 or volume.shape[0] < 1:
        raise ValueError(f"expected a T' x H' x W' x C volume with T' >= 1, got {volume.shape}")
    return volume.mean(axis=0)


def _bilinear(map2d: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``map2d`` on the grid ``ys x xs`` (feature-cell coordinates, clamped)."""
    h, w, _ = map2d.shape
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly = (ys - y0)[:, None, None]
    lx = (xs - x0)[None, :, None]
    top = map2d[y0][:, x0] * (1 - lx) + map2d[y0][:, x1] * lx
    bottom = map2d[y1][:, x0] * (1 - lx) + map2d[y1][:, x1] * lx
    return top * (1 - ly) + bottom * ly


def roi_align(map2d: np.ndarray, box: Box, output_size: tuple[int, int] = (7, 7),
              sampling_ratio: int = 2, spatial_scale: float = DEFAULT_SPATIAL_SCALE,
              image_size: tuple[float, float] | None = None) -> np.ndarray:
    """RoIAlign with the half-pixel-aligned convention: ``H' x W' x C -> out_h x out_w x C``.

    The box is clipped to the crop first. Each bin averages
    ``sampling_ratio**2`` bilinear samples at evenly spaced offsets. Sample
    points beyond the map clamp to the border cells.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    if map2d.ndim != 3:
        raise ValueError(f"expected an H' x W' x C map, got {map2d.shape}")
    if sampling_ratio < 1:
        raise ValueError("sampling_ratio must be >= 1")
    h, w, _ = map2d.shape
    if image_size is None:
        image_size = (w / spatial_scale, h / spatial_scale)
    box = box.clip(*image_size)
    out_h, out_w = output_size

    x_lo = box.x1 * spatial_scale - 0.5
    y_lo = box.y1 * spatial_scale - 0.5
    bin_w = (box.x2 - box.x1) * spatial_scale / out_w
    bin_h = (box.y2 - box.y1) * spatial_scale / out_h
    offsets = (np.arange(sampling_ratio) + 0.5) / sampling_ratio
    xs = x_lo + (np.arange(out_w)[:, None] + offsets[None, :]).reshape(-1) * bin_w
    ys = y_lo + (np.arange(out_h)[:, None] + offsets[None, :]).reshape(-1) * bin_h

    samples = _bilinear(map2d, ys, xs)
    samples = samples.reshape(out_h, sampling_ratio, out_w, sampling_ratio, -1)
    return samples.mean(axis=(1, 3))


def spatial_max_pool(bins: np.ndarray) -> np.ndarray:
    bins = np.asarray(bins)
    return bins.reshape(-1, bins.shape[-1]).max(axis=0)


def _partition(n: int, k: int) -> list[tuple[int, int]]:
    # Remainder cells go to the trailing bins.
    base, rem = divmod(n, k)
    sizes = [base] * (k - rem) + [base + 1] * rem
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(edges[i]), int(edges[i + 1])) for i in range(k)]


def grid_pool(map2d: np.ndarray, k: int) -> np.ndarray:
    """Average within a ``k x k`` grid of near-equal bins, row-major: ``k*k x C``."""
    map2d = np.asarray(map2d, dtype=np.float64)
    h, w, _ = map2d.shape
    if k < 1:
        raise ValueError("grid size must be >= 1")
    if k > min(h, w):
        raise ValueError(f"grid size {k} exceeds the {h} x {w} map")
    rows = [
        map2d[y0:y1, x0:x1].mean(axis=(0, 1))
        for y0, y1 in _partition(h, k)
        for x0, x1 in _partition(w, k)
    ]
    return np.stack(rows)


def global_pool(map2d: np.ndarray) -> np.ndarray:
    return grid_pool(map2d, 1)


def roi_feature(fmap: FeatureMap, box: Box, sampling_ratio: int = 2) -> np.ndarray:
    """Temporal average, 7 x 7 RoIAlign, then spatial max: one C-vector per box."""
    map2d = temporal_avg_pool(fmap.data)
    bins = roi_align(map2d, box, (7, 7), sampling_ratio, fmap.spatial_scale, fmap.image_size)
    return spatial_max_pool(bins)
