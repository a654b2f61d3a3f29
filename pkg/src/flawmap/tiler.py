"""Sliding-window tiling of large images and reassembly of per-tile maps.

The grid is anchored at the top-left corner. When the strides do not divide
the image exactly, the bottom and right border tiles run past the image and
the overhang is zero-filled, so every tile has the full window size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .ingest import ImageRecord


@dataclass(frozen=True)
class TileGrid:
    window: tuple[int, int]
    stride: tuple[int, int]
    rows: int
    cols: int
    pad: tuple[int, int]  # zero-filled overhang at (bottom, right)

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class Tile:
    source_id: str
    origin: tuple[int, int]  # (y, x) in source coordinates
    row: int
    col: int
    pixels: np.ndarray


def plan_grid(
    image_dims: tuple[int, int],
    window: tuple[int, int],
    stride: tuple[int, int],
) -> TileGrid:
    """Compute the tile grid covering an image of the given dimensions.

    Row and column counts are ceil((dim - window) / stride) + 1, so every
    source pixel falls inside at least one tile.
    """
    H, W = image_dims
    h, w = window
    dy, dx = stride
    if H < 1 or W < 1:
        raise ParameterError(f"image dims must be positive, got {image_dims}")
    if h < 1 or w < 1:
        raise ParameterError(f"window must be positive, got {window}")
    if dy < 1 or dx < 1:
        raise ParameterError(f"stride must be positive, got {stride}")

    rows, pad_bottom = _axis_count(H, h, dy)
    cols, pad_right = _axis_count(W, w, dx)
    if pad_bottom >= dy or pad_right >= dx:
        # Only possible when the window dwarfs the image; the tile would be
        # mostly padding.
        raise ParameterError(
            f"window {window} overhangs image {image_dims} by {(pad_bottom, pad_right)}, "
            f"which meets or exceeds the stride {stride}"
        )
    return TileGrid(window=(h, w), stride=(dy, dx), rows=rows, cols=cols, pad=(pad_bottom, pad_right))


def _axis_count(dim: int, win: int, step: int) -> tuple[int, int]:
    n = 1 if dim <= win else math.ceil((dim - win) / step) + 1
    return n, (n - 1) * step + win - dim


def iter_tiles(image: ImageRecord, grid: TileGrid) -> Iterator[Tile]:
    """Yield tiles in row-major order without materializing them all."""
    check = plan_grid((image.height, image.width), grid.window, grid.stride)
    if check != grid:
        raise ValidationError(
            f"grid {grid} does not match image {image.id} of dims "
            f"{(image.height, image.width)}"
        )
    h, w = grid.window
    dy, dx = grid.stride
    px = image.pixels
    for r in range(grid.rows):
        y = r * dy
        for c in range(grid.cols):
            x = c * dx
            vh = min(h, image.height - y)
            vw = min(w, image.width - x)
            if vh == h and vw == w:
                tile = px[y : y + h, x : x + w].copy()
            else:
                tile = np.zeros((h, w), dtype=px.dtype)
                tile[:vh, :vw] = px[y : y + vh, x : x + vw]
            yield Tile(source_id=image.id, origin=(y, x), row=r, col=c, pixels=tile)


def extract_tiles(image: ImageRecord, grid: TileGrid) -> list[Tile]:
    return list(iter_tiles(image, grid))


def stitch_map(
    tiles_values: Iterable[tuple[tuple[int, int], np.ndarray]] | Sequence,
    image_dims: tuple[int, int],
    reducer: str = "mean",
) -> np.ndarray:
    """Reassemble per-tile value maps into one image-sized map.

    ``tiles_values`` pairs each tile origin with a matrix of per-pixel
    values. Overlaps are combined with the chosen reducer; pixels no tile
    covers, and tile regions that fall outside the image, contribute zero.
    """
    if reducer not in ("mean", "max"):
        raise ParameterError(f"unknown reducer {reducer!r}")
    H, W = image_dims
    if H < 1 or W < 1:
        raise ParameterError(f"image dims must be positive, got {image_dims}")

    items = list(tiles_values)
    if not items:
        raise ParameterError("no tiles to stitch")

    acc = np.zeros((H, W), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    if reducer == "max":
        acc.fill(-np.inf)
    for origin, values in items:
        y, x = origin
        values = np.asarray(values, dtype=np.float64)
        vh = min(values.shape[0], H - y)
        vw = min(values.shape[1], W - x)
        if y < 0 or x < 0 or vh <= 0 or vw <= 0:
            raise ParameterError(f"tile origin {origin} outside image {image_dims}")
        block = values[:vh, :vw]
        region = (slice(y, y + vh), slice(x, x + vw))
        if reducer == "mean":
            acc[region] += block
        else:
            acc[region] = np.maximum(acc[region], block)
        count[region] += 1

    covered = count > 0
    if reducer == "mean":
        return np.where(covered, acc / np.maximum(count, 1), 0.0)
    return np.where(covered, acc, 0.0)
