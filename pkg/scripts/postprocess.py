# scripts/postprocess.py
from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

# neighbourhood size -> scipy structuring-element rank, per dimensionality
_CONNECTIVITY = {
    2: {4: 1, 8: 2},
    3: {6: 1, 18: 2, 26: 3},
}


def _structure(ndim: int, connectivity: int) -> np.ndarray:
    ranks = _CONNECTIVITY.get(ndim)
    if ranks is None or connectivity not in ranks:
        raise ValueError(
            f"connectivity {connectivity} not defined for {ndim}-D masks "
            f"(choose from {sorted(ranks or {})})"
        )
    return ndimage.generate_binary_structure(ndim, ranks[connectivity])


def connected_components(
    mask: np.ndarray, connectivity: int = 6
) -> tuple[np.ndarray, np.ndarray]:
    """
    Label maximal connected regions of a binary mask.

    Returns (ids, sizes): ids has 0 on background and 1..n on the regions,
    numbered in order of their first voxel in C order; sizes[i] is the voxel
    count of region i+1.
    """
    mask = np.asarray(mask, dtype=bool)
    ids, n = ndimage.label(mask, structure=_structure(mask.ndim, connectivity))
    sizes = np.bincount(ids.ravel(), minlength=n + 1)[1:]
    return ids, sizes


def largest_component(ids: np.ndarray, sizes: np.ndarray) -> int:
    """Id of the biggest region; ties go to the region holding the smallest voxel index."""
    if len(sizes) == 0:
        return 0
    uniq, first = np.unique(ids.ravel(), return_index=True)
    first_of = dict(zip(uniq.tolist(), first.tolist()))
    best = max(range(1, len(sizes) + 1), key=lambda i: (sizes[i - 1], -first_of[i]))
    return int(best)


def largest_component_filter(
    labelmap: np.ndarray, num_classes: int = 5, *, connectivity: int = 6
) -> np.ndarray:
    """Per foreground class, move voxels outside its largest component to background."""
    labelmap = np.asarray(labelmap)
    if labelmap.size and (labelmap.min() < 0 or labelmap.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labelmap.min()}, {labelmap.max()}]"
        )
    out = labelmap.copy()
    for k in range(1, num_classes):
        mask = labelmap == k
        if not mask.any():
            continue
        ids, sizes = connected_components(mask, connectivity)
        if len(sizes) <= 1:
            continue
        keep = largest_component(ids, sizes)
        cleared = mask & (ids != keep)
        out[cleared] = 0
        logger.debug("class %d: kept %d of %d voxels", k, sizes[keep - 1], int(mask.sum()))
    return out
