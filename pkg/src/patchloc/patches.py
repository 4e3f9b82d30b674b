"""Sliding-window patch extraction over feature maps.

Patches live on a regular grid: patch (gx, gy) covers feature cells
x in [gx*s_p, gx*s_p + d_p) and y likewise, and patch indices run in
row-major grid order (index = gy * n_x + gx).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGeometry
from .featureio import FeatureMap


def _check_geometry(height: int, width: int, d_p: int, s_p: int) -> None:
    if d_p < 1:
        raise InvalidGeometry(f"patch side d_p={d_p} must be >= 1")
    if s_p < 1:
        raise InvalidGeometry(f"stride s_p={s_p} must be >= 1")
    if d_p > min(height, width):
        raise InvalidGeometry(
            f"patch side d_p={d_p} exceeds min(H, W) = {min(height, width)}"
        )


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the patch lattice over one feature map."""

    d_p: int
    s_p: int
    n_x: int
    n_y: int
    height: int
    width: int

    @classmethod
    def for_map(cls, height: int, width: int, d_p: int, s_p: int) -> "PatchGrid":
        _check_geometry(height, width, d_p, s_p)
        n_x = (width - d_p) // s_p + 1
        n_y = (height - d_p) // s_p + 1
        return cls(d_p=d_p, s_p=s_p, n_x=n_x, n_y=n_y, height=height, width=width)

    @property
    def total(self) -> int:
        return self.n_x * self.n_y

    def coords_of(self, index: int) -> tuple[int, int]:
        """(gx, gy) of a row-major patch index."""
        return index % self.n_x, index // self.n_x


@dataclass(frozen=True)
class Patch:
    """One window of the feature map, flattened to (d_p*d_p) x D rows."""

    index: int
    grid_x: int
    grid_y: int
    features: np.ndarray


def patch_count(height: int, width: int, d_p: int, s_p: int) -> int:
    """Number of sliding windows that fit the map."""
    _check_geometry(height, width, d_p, s_p)
    return ((height - d_p) // s_p + 1) * ((width - d_p) // s_p + 1)


def extract_patches(fmap: FeatureMap, d_p: int, s_p: int) -> list[Patch]:
    """All patches of the map in row-major grid order.

    Patch rows follow the same row-major cell order as the map itself,
    so a full-size patch is exactly the map reshaped to (H*W, D).
    """
    grid = PatchGrid.for_map(fmap.height, fmap.width, d_p, s_p)
    out = []
    data = fmap.data
    for gy in range(grid.n_y):
        y0 = gy * s_p
        for gx in range(grid.n_x):
            x0 = gx * s_p
            block = data[y0:y0 + d_p, x0:x0 + d_p, :]
            out.append(
                Patch(
                    index=gy * grid.n_x + gx,
                    grid_x=gx,
                    grid_y=gy,
                    features=np.ascontiguousarray(
                        block.reshape(d_p * d_p, fmap.depth)
                    ),
                )
            )
    return out


def _pixel_to_cell(value: float, n_pixels: int, n_cells: int) -> int:
    scaled = value * n_cells / n_pixels
    cell = math.floor(scaled)
    # Exact boundaries belong to the lower cell so keypoint assignment
    # cannot flip with the rounding mode.
    if cell == scaled and cell > 0:
        cell -= 1
    return min(cell, n_cells - 1)


def patch_of_pixel(
    px: float,
    py: float,
    image_height: int,
    image_width: int,
    grid: PatchGrid,
) -> list[int]:
    """Patch indices whose windows contain the given image pixel.

    Pixel coordinates are scaled proportionally onto the feature-cell
    lattice. With overlapping windows (s_p < d_p) several patches may
    contain the cell; cells dropped by the sliding window yield an
    empty list.
    """
    if not (0 <= px <= image_width and 0 <= py <= image_height):
        raise InvalidGeometry(
            f"pixel ({px}, {py}) outside {image_height}x{image_width} image"
        )
    cx = _pixel_to_cell(px, image_width, grid.width)
    cy = _pixel_to_cell(py, image_height, grid.height)
    gx_lo = max(0, math.ceil((cx - grid.d_p + 1) / grid.s_p))
    gx_hi = min(grid.n_x - 1, cx // grid.s_p)
    gy_lo = max(0, math.ceil((cy - grid.d_p + 1) / grid.s_p))
    gy_hi = min(grid.n_y - 1, cy // grid.s_p)
    return [
        gy * grid.n_x + gx
        for gy in range(gy_lo, gy_hi + 1)
        for gx in range(gx_lo, gx_hi + 1)
    ]
