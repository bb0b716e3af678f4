"""Binary-mask post-processing.

The lung path is threshold at 0.5, hole filling, then removal of regions
smaller than 5% of the mask's total foreground. Infection masks get the
threshold and an AND against the post-processed lung mask, which keeps
every predicted infection pixel inside the lung area.

Masks are HxW uint8 arrays with values in {0, 1}. Foreground regions use
8-connectivity; background holes use 4-connectivity (the standard dual
pairing).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

_STRUCT_8 = np.ones((3, 3), dtype=bool)
_STRUCT_4 = ndimage.generate_binary_structure(2, 1)


def as_mask(values) -> np.ndarray:
    """Coerce to a 2-D uint8 {0,1} mask, validating binarity."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DimensionError(f"masks are 2-D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise DimensionError("mask values must be 0 or 1")
    return arr.astype(np.uint8)


def foreground_probs(probs) -> np.ndarray:
    """Extract the foreground-channel probabilities from a ProbMap array.

    Accepts either a 2xHxW two-class map (channel 1 = foreground) or an
    HxW foreground-probability plane.
    """
    arr = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    if arr.ndim == 3 and arr.shape[0] == 2:
        return arr[1]
    if arr.ndim == 2:
        return arr
    raise DimensionError(f"expected a 2xHxW or HxW probability map, got shape {arr.shape}")


def threshold(probs, t: float = 0.5) -> np.ndarray:
    """Pixel is foreground iff its probability strictly exceeds ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ConfigurationError(f"threshold must lie in [0, 1], got {t}")
    return (foreground_probs(probs) > t).astype(np.uint8)


@dataclass(frozen=True)
class Region:
    count: int
    bbox: Tuple[int, int, int, int]  # rmin, cmin, rmax, cmax (inclusive)
    centroid: Tuple[float, float]  # row, col


@dataclass(frozen=True)
class LabeledRegions:
    labels: np.ndarray  # HxW int32, 0 = background
    regions: Dict[int, Region]

    @property
    def count(self) -> int:
        return len(self.regions)


def _label(mask: np.ndarray, structure: np.ndarray) -> np.ndarray:
    """Label components, renumbered by first pixel in row-major scan order."""
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return labels.astype(np.int32)
    # Renumber by first occurrence so label order is deterministic.
    values = labels.ravel()[np.flatnonzero(labels.ravel())]
    uniq, first_idx = np.unique(values, return_index=True)
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[uniq[np.argsort(first_idx)]] = np.arange(1, n + 1, dtype=np.int32)
    return remap[labels]


def connected_components(mask) -> LabeledRegions:
    """8-connected foreground components with per-region statistics."""
    m = as_mask(mask)
    labels = _label(m.astype(bool), _STRUCT_8)
    n = int(labels.max())
    regions: Dict[int, Region] = {}
    if n:
        rows, cols = np.nonzero(labels)
        ids = labels[rows, cols]
        counts = np.bincount(ids, minlength=n + 1)
        sum_r = np.bincount(ids, weights=rows, minlength=n + 1)
        sum_c = np.bincount(ids, weights=cols, minlength=n + 1)
        for rid, sl in enumerate(ndimage.find_objects(labels), start=1):
            regions[rid] = Region(
                count=int(counts[rid]),
                bbox=(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1),
                centroid=(sum_r[rid] / counts[rid], sum_c[rid] / counts[rid]),
            )
    return LabeledRegions(labels=labels, regions=regions)


def fill_holes(mask) -> np.ndarray:
    """Set enclosed background to foreground.

    A hole is a 4-connected background component with no path to the
    image border; border-connected background is untouched.
    """
    m = as_mask(mask)
    bg_labels = _label(~m.astype(bool), _STRUCT_4)
    border = np.unique(
        np.concatenate(
            [bg_labels[0, :], bg_labels[-1, :], bg_labels[:, 0], bg_labels[:, -1]]
        )
    )
    hole = (bg_labels > 0) & ~np.isin(bg_labels, border)
    return (m.astype(bool) | hole).astype(np.uint8)


def remove_small_regions(mask, fraction: float = 0.05) -> np.ndarray:
    """Erase 8-connected regions strictly smaller than fraction * foreground.

    The threshold is computed once from the input's total foreground
    count, not iteratively.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    m = as_mask(mask)
    total = int(m.sum())
    if total == 0:
        return m.copy()
    comp = connected_components(m)
    cutoff = fraction * total
    keep = {rid for rid, region in comp.regions.items() if not region.count < cutoff}
    return np.isin(comp.labels, sorted(keep)).astype(np.uint8) if keep else np.zeros_like(m)


def intersect_masks(infection, lung) -> np.ndarray:
    """Pixelwise AND; the result is a subset of both inputs."""
    a, b = as_mask(infection), as_mask(lung)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return (a & b).astype(np.uint8)


def postprocess_lung(probs, t: float = 0.5, fraction: float = 0.05) -> np.ndarray:
    """threshold -> fill_holes -> remove_small_regions."""
    return remove_small_regions(fill_holes(threshold(probs, t)), fraction)


def postprocess_infection(probs, lung, t: float = 0.5, remove_small: bool = False) -> np.ndarray:
    """threshold -> AND with the post-processed lung mask.

    Hole filling and small-region removal are applied to lung masks only;
    set ``remove_small`` for the alternative reading that also prunes
    small infection regions before the intersection.
    """
    m = threshold(probs, t)
    if remove_small and m.any():
        m = remove_small_regions(m)
    return intersect_masks(m, lung)
