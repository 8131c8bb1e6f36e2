"""Slide tiling: grids, tile extraction with mirror fill, tissue filtering.

A slide region is decomposed into large stain-translation patches and
smaller detection tiles. Grids cover the full extent; tiles at the right or
bottom edge are shifted inward rather than padded, so detector inputs never
contain synthetic borders. Only when the whole extent is smaller than one
tile does extraction mirror-pad, centering the image inside the tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import FrameTransform, Point, round_half_up

__all__ = [
    "TileSpec",
    "TileGrid",
    "TilingConfig",
    "build_grid",
    "extract_tile",
    "tissue_fraction",
    "split_to_detection_tiles",
]


@dataclass(frozen=True)
class TileSpec:
    """Placement of a square tile inside the slide frame.

    The origin may be negative only for the degenerate single-tile grid over
    an extent smaller than the tile, where the image is centered inside a
    mirror border.
    """

    origin: Point
    size: int
    level: int = 0

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError(f"tile size must be positive, got {self.size}")
        if self.level != 0:
            raise ValueError("only pyramid level 0 is supported")

    @property
    def transform(self) -> FrameTransform:
        return FrameTransform(offset=self.origin, scale=1.0)


@dataclass(frozen=True)
class TileGrid:
    slide_extent: tuple[int, int]
    tile_size: int
    stride: int
    tiles: tuple[TileSpec, ...] = field(default_factory=tuple)
    padded: bool = False


@dataclass
class TilingConfig:
    """Tiling knobs used by the inference pipeline."""

    translation_tile_size: int = 1024
    translation_stride: int = 1024
    detection_stride: int = 448
    min_tissue_fraction: float = 0.05
    background_luminance: float = 0.85

    def validate(self) -> None:
        if self.translation_tile_size <= 0:
            raise ValueError("translation_tile_size must be positive")
        if not 0 < self.translation_stride <= self.translation_tile_size:
            raise ValueError("translation_stride must lie in (0, translation_tile_size]")
        if self.detection_stride <= 0:
            raise ValueError("detection_stride must be positive")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ValueError("min_tissue_fraction must lie in [0, 1]")
        if not 0.0 < self.background_luminance <= 1.0:
            raise ValueError("background_luminance must lie in (0, 1]")


def _axis_positions(extent: int, tile: int, stride: int) -> tuple[list[int], bool]:
    """Tile origins along one axis; bool marks the degenerate mirror-pad case."""
    if extent >= tile:
        positions = list(range(0, extent - tile + 1, stride))
        if positions[-1] != extent - tile:
            positions.append(extent - tile)
        return positions, False
    # extent < tile: single tile, image centered in a mirror border
    return [-((tile - extent) // 2)], True


def build_grid(extent: tuple[int, int], tile_size: int, stride: int) -> TileGrid:
    """Row-major grid of tiles covering every pixel of ``extent``.

    Edge tiles are shifted inward so all tiles lie inside the extent whenever
    the extent is at least one tile wide; otherwise a single mirror-padded
    tile is produced and the grid is marked ``padded``.
    """
    w, h = extent
    if w <= 0 or h <= 0:
        raise ValueError(f"extent must be positive, got {extent}")
    if tile_size <= 0:
        raise ValueError(f"tile_size must be positive, got {tile_size}")
    if not 0 < stride <= tile_size:
        raise ValueError(f"stride must lie in (0, tile_size], got {stride}")

    xs, pad_x = _axis_positions(w, tile_size, stride)
    ys, pad_y = _axis_positions(h, tile_size, stride)
    tiles = tuple(
        TileSpec(origin=Point(float(x), float(y)), size=tile_size) for y in ys for x in xs
    )
    return TileGrid(
        slide_extent=(w, h),
        tile_size=tile_size,
        stride=stride,
        tiles=tiles,
        padded=pad_x or pad_y,
    )


def _reflect_indices(start: int, count: int, n: int) -> np.ndarray:
    """Mirror indices without edge duplication: ..., 2, 1, 0, 1, ..., n-1, n-2, ..."""
    idx = np.arange(start, start + count)
    if n == 1:
        return np.zeros(count, dtype=np.int64)
    period = 2 * n - 2
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


def extract_tile(image: np.ndarray, spec: TileSpec) -> np.ndarray:
    """Copy the pixels covered by ``spec`` out of ``image``.

    Windows fully inside the image are exact pixel copies. Out-of-range rows
    or columns (the degenerate extent < tile case) are mirror-filled.
    """
    if image.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D raster, got shape {image.shape}")
    h, w = image.shape[:2]
    x0, y0 = round_half_up(spec.origin.x), round_half_up(spec.origin.y)
    s = spec.size
    if x0 < -(w - 1) or y0 < -(h - 1) or x0 + s > 2 * w - 1 or y0 + s > 2 * h - 1:
        raise ValueError(
            f"tile at ({x0}, {y0}) size {s} lies outside the padded extent of a {w}x{h} image"
        )
    if 0 <= x0 and 0 <= y0 and x0 + s <= w and y0 + s <= h:
        return image[y0 : y0 + s, x0 : x0 + s].copy()
    rx = _reflect_indices(x0, s, w)
    ry = _reflect_indices(y0, s, h)
    return image[np.ix_(ry, rx)]


def tissue_fraction(tile: np.ndarray, background_luminance: float = 0.85) -> float:
    """Fraction of pixels darker than the background luminance threshold.

    Luminance is 0.299 R + 0.587 G + 0.114 B, compared against
    ``background_luminance`` times the dtype maximum (255 for uint8 rasters,
    1.0 for float rasters).
    """
    if tile.size == 0:
        raise ValueError("tile must be non-empty")
    arr = np.asarray(tile, dtype=np.float64)
    if arr.ndim == 3:
        luma = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    else:
        luma = arr
    scale = 255.0 if np.issubdtype(tile.dtype, np.integer) else 1.0
    return float(np.mean(luma < background_luminance * scale))


def split_to_detection_tiles(
    patch_spec: TileSpec, det_tile: int = 512, det_stride: int | None = None
) -> list[TileSpec]:
    """Decompose a translation patch into detection tiles, in the slide frame.

    Child origins are the patch origin plus local offsets; the local layout
    follows the same inward-shift rule as :func:`build_grid`.
    """
    if det_stride is None:
        det_stride = det_tile
    if det_tile > patch_spec.size:
        raise ValueError(
            f"detection tile ({det_tile}) cannot exceed the patch size ({patch_spec.size})"
        )
    if not 0 < det_stride <= det_tile:
        raise ValueError(f"det_stride must lie in (0, det_tile], got {det_stride}")
    xs, _ = _axis_positions(patch_spec.size, det_tile, det_stride)
    ys, _ = _axis_positions(patch_spec.size, det_tile, det_stride)
    ox, oy = patch_spec.origin.x, patch_spec.origin.y
    return [
        TileSpec(origin=Point(ox + x, oy + y), size=det_tile, level=patch_spec.level)
        for y in ys
        for x in xs
    ]
