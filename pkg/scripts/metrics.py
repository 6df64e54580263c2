# scripts/metrics.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from scripts.config import class_names

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OrganScore:
    dsc: float
    hd: float  # mm; NaN when undefined (either mask empty)

    @property
    def hd_defined(self) -> bool:
        return bool(np.isfinite(self.hd))


@dataclass
class MetricsReport:
    per_class: dict[str, OrganScore]
    mean_dsc: float
    mean_hd: float
    counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, per_class: dict[str, OrganScore], counts: dict[str, int]):
        dscs = [s.dsc for s in per_class.values()]
        hds = [s.hd for s in per_class.values() if s.hd_defined]
        return cls(
            per_class=dict(per_class),
            mean_dsc=float(np.mean(dscs)) if dscs else float("nan"),
            mean_hd=float(np.mean(hds)) if hds else float("nan"),
            counts=dict(counts),
        )


def _check_pair(gt: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt).astype(bool)
    pred = np.asarray(pred).astype(bool)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: gt {gt.shape} vs pred {pred.shape}")
    return gt, pred


def dice_score(gt: np.ndarray, pred: np.ndarray) -> float:
    """2|G & P| / (|G| + |P|); two empty masks score 1."""
    gt, pred = _check_pair(gt, pred)
    total = int(gt.sum()) + int(pred.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(gt, pred).sum()) / total


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """
    Voxels of `mask` with at least one face neighbour outside the mask.
    The array border counts as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def _axis_spacing(spacing: Sequence[float], ndim: int) -> np.ndarray:
    # spacing is given as (sx, sy[, sz]); arrays are indexed [.., y, x]
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (ndim,):
        raise ValueError(f"spacing {tuple(spacing)} does not match a {ndim}-D mask")
    if np.any(sp <= 0):
        raise ValueError(f"spacing components must be > 0, got {tuple(spacing)}")
    return sp[::-1]


def physical_points(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return np.argwhere(mask).astype(np.float64) * _axis_spacing(spacing, mask.ndim)


def directed_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """max over points of `a` of the distance to the nearest point of `b`."""
    dist, _ = cKDTree(b).query(a, k=1)
    return float(np.max(dist))


def hausdorff_distance(
    gt: np.ndarray,
    pred: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    *,
    surface: bool = True,
) -> float:
    """
    Symmetric Hausdorff distance in mm between voxel centres.

    surface=True measures between the 6-neighbourhood boundary voxels of each
    mask; surface=False uses every voxel. Returns NaN when either mask is empty.
    """
    gt, pred = _check_pair(gt, pred)
    if not gt.any() or not pred.any():
        return float("nan")
    if surface:
        gt, pred = boundary_voxels(gt), boundary_voxels(pred)
    a = physical_points(gt, spacing)
    b = physical_points(pred, spacing)
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def _check_labels(labels: np.ndarray, num_classes: int, name: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"{name} labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def evaluate_volume(
    gt: np.ndarray,
    pred: np.ndarray,
    spacing: Sequence[float],
    num_classes: int = 5,
    *,
    surface: bool = True,
) -> MetricsReport:
    """Per foreground class DSC and HD, plus means over foreground classes."""
    gt = _check_labels(gt, num_classes, "gt")
    pred = _check_labels(pred, num_classes, "pred")
    if gt.shape != pred.shape:
        raise ValueError(f"label map shapes differ: gt {gt.shape} vs pred {pred.shape}")

    names = class_names(num_classes)
    per_class: dict[str, OrganScore] = {}
    counts: dict[str, int] = {}
    for k in range(1, num_classes):
        g, p = gt == k, pred == k
        score = OrganScore(dice_score(g, p), hausdorff_distance(g, p, spacing, surface=surface))
        if not score.hd_defined:
            logger.warning("HD undefined for %s (gt=%d, pred=%d voxels)", names[k], g.sum(), p.sum())
        per_class[names[k]] = score
        counts[names[k]] = int(g.sum())
    return MetricsReport.from_scores(per_class, counts)


def mean_foreground_dice(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> float:
    """Mean DSC over classes 1..K-1 with all pixels pooled."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    return float(np.mean([dice_score(gt == k, pred == k) for k in range(1, num_classes)]))


def per_class_dice(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> dict[str, float]:
    names = class_names(num_classes)
    return {names[k]: dice_score(gt == k, pred == k) for k in range(1, num_classes)}
