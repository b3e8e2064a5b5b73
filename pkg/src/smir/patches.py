"""Patch grid, per-patch masks and per-patch loss maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and column")
        if self.patch_h < 3 or self.patch_w < 3:
            raise ValueError(f"patches must be at least 3x3, got {self.patch_h}x{self.patch_w}")

    @property
    def image_h(self) -> int:
        return self.rows * self.patch_h

    @property
    def image_w(self) -> int:
        return self.cols * self.patch_w

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    def check_image(self, image: np.ndarray) -> None:
        if image.shape[0] != self.image_h or image.shape[1] != self.image_w:
            raise ValueError(
                f"image {image.shape[:2]} does not match grid {self.image_h}x{self.image_w}"
            )

    def patch_slices(self, n: int) -> tuple[slice, slice]:
        r, c = divmod(n, self.cols)
        return (
            slice(r * self.patch_h, (r + 1) * self.patch_h),
            slice(c * self.patch_w, (c + 1) * self.patch_w),
        )

    def to_blocks(self, image: np.ndarray) -> np.ndarray:
        """H x W x C image -> (P, C, patch_h, patch_w), patches in row-major order."""
        self.check_image(image)
        img = image if image.ndim == 3 else image[..., None]
        c = img.shape[2]
        blocks = img.reshape(self.rows, self.patch_h, self.cols, self.patch_w, c)
        return blocks.transpose(0, 2, 4, 1, 3).reshape(self.num_patches, c, self.patch_h, self.patch_w)

    def pixel_mask(self, masked: np.ndarray) -> np.ndarray:
        """Expand a per-patch boolean vector to an H x W boolean map."""
        grid = np.asarray(masked, dtype=bool).reshape(self.rows, self.cols)
        return np.repeat(np.repeat(grid, self.patch_h, axis=0), self.patch_w, axis=1)


def make_grid(image_h: int, image_w: int, target_patches: int) -> PatchGrid:
    """Factor ``target_patches`` into rows x cols dividing the image, closest to square patches.

    Ties between mirrored factorizations go to taller patches (fewer rows).
    """
    if target_patches < 4:
        raise ValueError("target_patches must be >= 4")
    best = None
    for rows in range(1, target_patches + 1):
        if target_patches % rows:
            continue
        cols = target_patches // rows
        if image_h % rows or image_w % cols:
            continue
        ph, pw = image_h // rows, image_w // cols
        if ph < 3 or pw < 3:
            continue
        key = (Fraction(max(ph, pw), min(ph, pw)), rows)
        if best is None or key < best[0]:
            best = (key, rows, cols, ph, pw)
    if best is None:
        raise ValueError(
            f"no factorization of {target_patches} patches divides a {image_h}x{image_w} image"
        )
    _, rows, cols, ph, pw = best
    return PatchGrid(rows, cols, ph, pw)


def masked_count(ratio: float, num_patches: int) -> int:
    """round(ratio * P), half-up."""
    return int(math.floor(ratio * num_patches + 0.5))


@dataclass
class PatchMask:
    grid: PatchGrid
    masked: np.ndarray

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool).reshape(-1)
        if self.masked.size != self.grid.num_patches:
            raise ValueError(f"mask has {self.masked.size} entries, grid has {self.grid.num_patches}")

    @property
    def count(self) -> int:
        return int(self.masked.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    def complement(self) -> "PatchMask":
        return PatchMask(self.grid, ~self.masked)

    def pixel_mask(self) -> np.ndarray:
        return self.grid.pixel_mask(self.masked)

    def to_bits(self) -> str:
        return "".join("1" if m else "0" for m in self.masked)


@dataclass
class PatchLossMap:
    grid: PatchGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.grid.num_patches:
            raise ValueError(f"loss map has {self.values.size} entries, grid has {self.grid.num_patches}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("patch losses must be finite and non-negative")
