# scripts/augmentation.py
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentRanges:
    zoom: tuple[float, float] = (0.9, 1.1)
    rotation: float = 10.0  # degrees, symmetric
    shift: float = 0.10  # fraction of the slice extent, symmetric
    shear: float = 5.0  # degrees, symmetric
    crop_jitter: int = 8  # pixels
    flip_h_prob: float = 0.0
    flip_v_prob: float = 0.0

    def validate(self) -> "AugmentRanges":
        problems = []
        lo, hi = self.zoom
        if not 0 < lo <= hi:
            problems.append(f"zoom={self.zoom} (need 0 < lo <= hi)")
        for name in ("rotation", "shift", "shear"):
            if getattr(self, name) < 0:
                problems.append(f"{name}={getattr(self, name)} (must be >= 0)")
        if self.crop_jitter < 0:
            problems.append(f"crop_jitter={self.crop_jitter} (must be >= 0)")
        for name in ("flip_h_prob", "flip_v_prob"):
            if not 0 <= getattr(self, name) <= 1:
                problems.append(f"{name}={getattr(self, name)} (must be in [0, 1])")
        if problems:
            raise ValueError("Invalid AugmentRanges: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "zoom": list(self.zoom),
            "rotation": self.rotation,
            "shift": self.shift,
            "shear": self.shear,
            "crop_jitter": self.crop_jitter,
            "flip_h_prob": self.flip_h_prob,
            "flip_v_prob": self.flip_v_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentRanges":
        d = dict(d)
        d["zoom"] = tuple(d.get("zoom", (0.9, 1.1)))
        return cls(**d).validate()


@dataclass(frozen=True)
class AugmentParams:
    zoom: float = 1.0
    rotation: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    shear: float = 0.0
    crop_jitter: tuple[int, int] = (0, 0)
    flip_h: bool = False
    flip_v: bool = False
    rng_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return (
            self.zoom == 1.0
            and self.rotation == 0.0
            and self.shift == (0.0, 0.0)
            and self.shear == 0.0
            and tuple(self.crop_jitter) == (0, 0)
            and not self.flip_h
            and not self.flip_v
        )


def draw_augment_params(rng_seed: int, ranges: AugmentRanges | None = None) -> AugmentParams:
    """Sample one parameter set; the same seed always gives the same parameters."""
    ranges = (ranges or AugmentRanges()).validate()
    rng = np.random.default_rng(rng_seed)
    j = ranges.crop_jitter
    return AugmentParams(
        zoom=float(rng.uniform(*ranges.zoom)),
        rotation=float(rng.uniform(-ranges.rotation, ranges.rotation)),
        shift=(
            float(rng.uniform(-ranges.shift, ranges.shift)),
            float(rng.uniform(-ranges.shift, ranges.shift)),
        ),
        shear=float(rng.uniform(-ranges.shear, ranges.shear)),
        crop_jitter=(int(rng.integers(-j, j + 1)), int(rng.integers(-j, j + 1))),
        flip_h=bool(rng.random() < ranges.flip_h_prob),
        flip_v=bool(rng.random() < ranges.flip_v_prob),
        rng_seed=int(rng_seed),
    )


def affine_matrix(params: AugmentParams) -> np.ndarray:
    """Forward 2x2 transform in (row, col) coordinates: rotation @ shear @ zoom."""
    th = np.deg2rad(params.rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, 0.0], [np.tan(np.deg2rad(params.shear)), 1.0]])
    zoom = np.eye(2) * params.zoom
    return rot @ shear @ zoom


def random_augment(
    image: np.ndarray, labels: np.ndarray, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray]:
    """
    Apply one composed in-plane affine transform about the slice centre.

    The image is resampled bilinearly with the image minimum outside the
    frame; labels are resampled nearest-neighbour with background outside.
    """
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.ndim != 2 or labels.shape != image.shape:
        raise ValueError(
            f"random_augment expects matching 2-D image/labels, got {image.shape} and {labels.shape}"
        )
    if params.is_identity:
        return image.copy(), labels.copy()

    h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array(
        [params.shift[0] * h + params.crop_jitter[0], params.shift[1] * w + params.crop_jitter[1]]
    )
    inv = np.linalg.inv(affine_matrix(params))
    offset = center - inv @ (center + shift)

    out_img = ndimage.affine_transform(
        image, inv, offset=offset, order=1, mode="constant", cval=float(image.min())
    )
    out_lab = ndimage.affine_transform(
        labels.astype(np.int64), inv, offset=offset, order=0, mode="constant", cval=0
    ).astype(labels.dtype)

    if params.flip_h:
        out_img, out_lab = out_img[:, ::-1], out_lab[:, ::-1]
    if params.flip_v:
        out_img, out_lab = out_img[::-1], out_lab[::-1]
    return np.ascontiguousarray(out_img), np.ascontiguousarray(out_lab)
