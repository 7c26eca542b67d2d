"""Density maps on the feature grid: rendering, masking, peaks, sums."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Rendered densities are snapped to integer multiples of this quantum. Sums of
# such values are exact in float64 (for totals far below 2**20), so any
# partition of a map sums back to the map total bit for bit.
DENSITY_QUANTUM = 2.0 ** -32
TRUNCATE_SIGMAS = 4.0

GridCoordinate = tuple[int, int]


@dataclass(frozen=True)
class PointAnnotation:
    id: int
    x: float
    y: float


@dataclass
class DensityMap:
    values: np.ndarray  # (height, width), row-major
    downsample: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"density map needs a non-empty 2-D grid, got {self.values.shape}")
        if self.downsample < 1:
            raise ValueError("downsample must be a positive integer")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "downsample": self.downsample,
            "values": self.values.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> DensityMap:
        values = np.asarray(data["values"], dtype=np.float64).reshape(data["height"], data["width"])
        return cls(values, int(data["downsample"]))


@dataclass
class BinaryMask:
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def coords(self) -> list[GridCoordinate]:
        """True cells as (x, y), row-major order."""
        ys, xs = np.nonzero(self.bits)
        return list(zip(xs.tolist(), ys.tolist()))

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "bits": self.bits.ravel().tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> BinaryMask:
        return cls(np.asarray(data["bits"], dtype=bool).reshape(data["height"], data["width"]))


def gaussian_blob(cx: float, cy: float, sigma: float, width: int, height: int):
    """Normalized truncated Gaussian around grid position (cx, cy).

    Cell (i, j) has its center at (i + 0.5, j + 0.5). The kernel is evaluated at
    cell centers within ``TRUNCATE_SIGMAS * sigma`` and normalized over the cells
    that land inside the grid, so every blob carries unit mass.

    Returns ``(ys, xs, weights)`` or ``None`` when no cell center is in range.
    """
    reach = TRUNCATE_SIGMAS * sigma
    x0 = max(int(np.floor(cx - reach - 0.5)), 0)
    x1 = min(int(np.ceil(cx + reach - 0.5)), width - 1)
    y0 = max(int(np.floor(cy - reach - 0.5)), 0)
    y1 = min(int(np.ceil(cy + reach - 0.5)), height - 1)
    if x0 > x1 or y0 > y1:
        return None
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    d2 = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2
    keep = d2 <= reach * reach
    w = np.exp(-d2[keep] / (2.0 * sigma * sigma))
    total = w.sum()
    if total <= 0:
        return None
    return ys[keep], xs[keep], w / total


def render_density(
    points: list[PointAnnotation], sigma: float, width: int, height: int, downsample: int
) -> DensityMap:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    frame_w, frame_h = width * downsample, height * downsample
    values = np.zeros((height, width))
    for p in points:
        if not (0 <= p.x < frame_w and 0 <= p.y < frame_h):
            raise ValueError(f"point {p} lies outside the {frame_w}x{frame_h} frame")
        blob = gaussian_blob(p.x / downsample, p.y / downsample, sigma, width, height)
        if blob is None:
            # sigma far below one cell: all mass goes to the containing cell
            values[int(p.y // downsample), int(p.x // downsample)] += 1.0
            continue
        ys, xs, w = blob
        np.add.at(values, (ys, xs), w)
    values = np.round(values / DENSITY_QUANTUM) * DENSITY_QUANTUM
    return DensityMap(values, downsample)


def mask_from_density(d: DensityMap, tau: float) -> BinaryMask:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return BinaryMask(d.values > tau)


def local_maxima(d: DensityMap, min_value: float, radius: int = 1) -> list[GridCoordinate]:
    """Cells strictly greater than every other cell in their (2r+1)^2 window."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    size = 2 * radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[radius, radius] = False
    neighbor_max = ndimage.maximum_filter(
        d.values, footprint=footprint, mode="constant", cval=-np.inf
    )
    peaks = (d.values > neighbor_max) & (d.values > min_value)
    ys, xs = np.nonzero(peaks)  # row-major, i.e. sorted by (y, x)
    return list(zip(xs.tolist(), ys.tolist()))


def density_sum(d: DensityMap) -> float:
    return float(d.values.sum())
