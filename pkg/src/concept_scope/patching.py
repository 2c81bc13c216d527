"""Patch grids over square image domains and the occlusion operator.

Patch coordinates are 1-based ``(lx, ly)`` with ``lx`` indexing rows and
``ly`` columns; grids are enumerated row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class PatchCoord(NamedTuple):
    lx: int
    ly: int


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size < 1:
            raise ValueError("image and patch sizes must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}"
            )

    @property
    def grid_w(self) -> int:
        return self.image_size // self.patch_size

    grid_h = grid_w

    def __len__(self) -> int:
        return self.grid_w * self.grid_h

    def coords(self) -> list[PatchCoord]:
        return [PatchCoord(lx, ly) for lx in range(1, self.grid_h + 1) for ly in range(1, self.grid_w + 1)]

    def index(self, patch: PatchCoord) -> int:
        self.check(patch)
        return (patch.lx - 1) * self.grid_w + (patch.ly - 1)

    def coord(self, index: int) -> PatchCoord:
        if not 0 <= index < len(self):
            raise IndexError(f"patch index {index} out of range")
        return PatchCoord(index // self.grid_w + 1, index % self.grid_w + 1)

    def check(self, patch: PatchCoord) -> None:
        if not (1 <= patch.lx <= self.grid_h and 1 <= patch.ly <= self.grid_w):
            raise ValueError(f"patch {tuple(patch)} outside {self.grid_h}x{self.grid_w} grid")

    def pixel_slices(self, patch: PatchCoord) -> tuple[slice, slice]:
        """0-based half-open pixel ranges of a patch (rows, cols)."""
        self.check(patch)
        s = self.patch_size
        return slice((patch.lx - 1) * s, patch.lx * s), slice((patch.ly - 1) * s, patch.ly * s)


def partition(image_size: int, patch_size: int) -> list[PatchCoord]:
    return PatchGrid(image_size, patch_size).coords()


def occlude(image: np.ndarray, patch: PatchCoord, patch_size: int) -> np.ndarray:
    """Copy of ``image`` with the patch's pixels set to 0 (raw pixel domain)."""
    image = np.asarray(image)
    if image.shape[0] != image.shape[1]:
        raise ValueError("occlusion expects a square image")
    rows, cols = PatchGrid(image.shape[0], patch_size).pixel_slices(patch)
    out = image.copy()
    out[rows, cols] = 0
    return out


def occlude_box(image: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    """Zero the ``size`` x ``size`` block whose top-left pixel is (row, col)."""
    out = np.array(image, copy=True)
    if row < 0 or col < 0 or row + size > out.shape[0] or col + size > out.shape[1]:
        raise ValueError("occlusion box outside image")
    out[row:row + size, col:col + size] = 0
    return out


def map_patch_to_feature_region(
    patch: PatchCoord, patch_size: int, image_size: int, feature_hw: tuple[int, int]
) -> tuple[slice, slice]:
    """Feature-map rows/cols covered by a patch.

    Start is floored and end ceiled so misaligned grids lose no feature cell;
    the region is never empty.
    """
    PatchGrid(image_size, patch_size).check(patch)
    hf, wf = feature_hw

    def span(l: int, n: int) -> slice:
        # integer arithmetic keeps exact multiples exact
        lo = ((l - 1) * patch_size * n) // image_size
        hi = -((-l * patch_size * n) // image_size)
        return slice(lo, max(hi, lo + 1))

    return span(patch.lx, hf), span(patch.ly, wf)


def quadtree_levels(image_size: int, min_patch: int) -> int:
    """Number of halving levels from the full image down to ``min_patch``."""
    if min_patch < 1 or image_size % min_patch:
        raise ValueError(f"minimum patch {min_patch} must divide image size {image_size}")
    ratio = image_size // min_patch
    levels = int(round(math.log2(ratio))) if ratio > 0 else 0
    if 2 ** levels != ratio or levels < 1:
        raise ValueError(f"image_size / min_patch = {ratio} is not a power of two >= 2")
    return levels
