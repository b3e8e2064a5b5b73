"""Random and selective patch masking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .metrics import patch_loss
from .patches import PatchGrid, PatchLossMap, PatchMask, make_grid, masked_count

log = logging.getLogger(__name__)

# maps a stack of masked H x W x C images to reconstructions of the same shape
Reconstructor = Callable[[np.ndarray], np.ndarray]

__all__ = [
    "MaskedSample",
    "PatchGrid",
    "PatchLossMap",
    "PatchMask",
    "aggregate_loss",
    "apply_mask",
    "gen_samples",
    "make_grid",
    "random_mask",
    "select_top",
    "selective_mask_image",
]


@dataclass
class MaskedSample:
    index: int
    mask: PatchMask
    masked_image: np.ndarray


def _check_ratio(ratio: float) -> None:
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")


def random_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> PatchMask:
    _check_ratio(ratio)
    k = masked_count(ratio, grid.num_patches)
    masked = np.zeros(grid.num_patches, dtype=bool)
    masked[rng.permutation(grid.num_patches)[:k]] = True
    return PatchMask(grid, masked)


def apply_mask(image: np.ndarray, mask: PatchMask, fill: float = 0.0) -> np.ndarray:
    image = np.asarray(image)
    mask.grid.check_image(image)
    out = image.copy()
    out[mask.pixel_mask()] = fill
    return out


def gen_samples(
    image: np.ndarray,
    grid: PatchGrid,
    rng: np.random.Generator,
    k: int = 5,
    ratio: float = 0.5,
    fill: float = 0.0,
    paired: bool = True,
) -> list[MaskedSample]:
    """k randomly masked copies of ``image``.

    With ``paired`` set, samples (0, 1) and (2, 3) are complements of each other
    so every patch is masked at least twice for k=5, ratio=0.5.  Pairing is
    skipped when the complement would not hold the same masked count.
    """
    if k < 2:
        raise ValueError("need at least two samples")
    _check_ratio(ratio)
    P = grid.num_patches
    if paired and 2 * masked_count(ratio, P) != P:
        log.info("ratio %.3f on %d patches has no equal-size complement; sampling i.i.d.", ratio, P)
        paired = False
    masks: list[PatchMask] = []
    for i in range(k):
        if paired and i % 2 == 1 and i < 4:
            masks.append(masks[-1].complement())
        else:
            masks.append(random_mask(grid, ratio, rng))
    return [MaskedSample(i, m, apply_mask(image, m, fill)) for i, m in enumerate(masks)]


def aggregate_loss(maps: Sequence[PatchLossMap]) -> PatchLossMap:
    if not maps:
        raise ValueError("no loss maps to aggregate")
    grid = maps[0].grid
    total = np.zeros(grid.num_patches)
    for m in maps:
        if m.grid != grid:
            raise ValueError("loss maps do not share one grid")
        total = total + m.values
    return PatchLossMap(grid, total)


def select_top(lossmap: PatchLossMap, ratio: float) -> PatchMask:
    """Mask the round(ratio*P) highest-loss patches; ties go to the lower index."""
    _check_ratio(ratio)
    k = masked_count(ratio, lossmap.grid.num_patches)
    order = np.lexsort((np.arange(lossmap.values.size), -lossmap.values))
    masked = np.zeros(lossmap.values.size, dtype=bool)
    masked[order[:k]] = True
    return PatchMask(lossmap.grid, masked)


def sample_loss_maps(
    model: Reconstructor,
    image: np.ndarray,
    grid: PatchGrid,
    rng: np.random.Generator,
    k: int = 5,
    ratio: float = 0.5,
    fill: float = 0.0,
    paired: bool = True,
) -> tuple[list[MaskedSample], list[PatchLossMap]]:
    samples = gen_samples(image, grid, rng, k=k, ratio=ratio, fill=fill, paired=paired)
    recons = np.asarray(model(np.stack([s.masked_image for s in samples])))
    if recons.shape != (k,) + image.shape:
        raise ValueError(f"reconstructor returned {recons.shape}, expected {(k,) + image.shape}")
    return samples, [patch_loss(r, image, grid) for r in recons]


def selective_mask_image(
    model: Reconstructor,
    image: np.ndarray,
    grid: PatchGrid,
    rng: np.random.Generator,
    k: int = 5,
    ratio: float = 0.5,
    fill: float = 0.0,
    paired: bool = True,
) -> tuple[PatchMask, np.ndarray]:
    """Mask the patches that ``model`` reconstructs worst across k random samples."""
    image = np.asarray(image, dtype=np.float64)
    _, maps = sample_loss_maps(model, image, grid, rng, k=k, ratio=ratio, fill=fill, paired=paired)
    mask = select_top(aggregate_loss(maps), ratio)
    return mask, apply_mask(image, mask, fill)
