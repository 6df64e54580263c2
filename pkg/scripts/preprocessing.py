# scripts/preprocessing.py
from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from scripts.volume_io import Volume

logger = logging.getLogger(__name__)

FLIP_AXES = {"horizontal": 2, "vertical": 1}
FLIP_SUFFIXES = {"horizontal": "flip_h", "vertical": "flip_v"}
CLAHE_LEVELS = 256


@dataclass(frozen=True)
class PreprocessConfig:
    window_lo: float = -1000.0
    window_hi: float = 1000.0
    clahe: bool = True
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    crop: tuple[int, int] = (288, 288)
    offline_flips: bool = True

    def validate(self) -> "PreprocessConfig":
        problems = []
        if not self.window_lo < self.window_hi:
            problems.append(f"window {self.window_lo}..{self.window_hi} (lo must be < hi)")
        if not self.clahe_clip > 0:
            problems.append(f"clahe_clip={self.clahe_clip} (must be > 0, inf disables clipping)")
        if len(self.clahe_tiles) != 2 or min(self.clahe_tiles) < 1:
            problems.append(f"clahe_tiles={self.clahe_tiles} (two values >= 1)")
        if len(self.crop) != 2 or min(self.crop) < 1:
            problems.append(f"crop={self.crop} (two values >= 1)")
        if problems:
            raise ValueError("Invalid PreprocessConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "window_lo": self.window_lo,
            "window_hi": self.window_hi,
            "clahe": self.clahe,
            "clahe_clip": self.clahe_clip,
            "clahe_tiles": list(self.clahe_tiles),
            "crop": list(self.crop),
            "offline_flips": self.offline_flips,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        d["clahe_tiles"] = tuple(d.get("clahe_tiles", (8, 8)))
        d["crop"] = tuple(d.get("crop", (288, 288)))
        return cls(**d).validate()


def _map_data(volume, fn):
    if isinstance(volume, Volume):
        return volume.with_arrays(fn(volume.data), volume.labels)
    return fn(np.asarray(volume, dtype=np.float64))


# ============================
# Intensity
# ============================


def window_and_scale(volume, lo_hu: float = -1000.0, hi_hu: float = 1000.0):
    """Clamp to [lo_hu, hi_hu] and map linearly onto [0, 1]."""
    if not lo_hu < hi_hu:
        raise ValueError(f"window needs lo_hu < hi_hu, got {lo_hu}..{hi_hu}")
    return _map_data(volume, lambda x: (np.clip(x, lo_hu, hi_hu) - lo_hu) / (hi_hu - lo_hu))


def normalize_volume(volume):
    """Zero mean, unit (population) standard deviation over the whole volume."""

    def _norm(x):
        if x.size < 2:
            raise ValueError(f"normalize_volume needs >= 2 voxels, got {x.size}")
        std = x.std()
        if not std > 0:
            raise ValueError("normalize_volume: volume has zero variance")
        return (x - x.mean()) / std

    return _map_data(volume, _norm)


def clahe_slice(
    image: np.ndarray,
    clip_limit: float = 2.0,
    tiles: tuple[int, int] = (8, 8),
) -> np.ndarray:
    """
    Contrast-limited adaptive histogram equalization of a 2-D slice in [0, 1].

    The slice is quantized to 256 grey levels and passed through OpenCV's CLAHE.
    clip_limit is a multiple of the uniform bin height (tile pixels / 256);
    clip_limit=inf turns clipping off, giving plain per-tile equalization.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"clahe_slice expects a 2-D slice, got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError(
            f"clahe_slice expects values in [0, 1], got [{image.min()}, {image.max()}]"
        )
    h, w = image.shape
    ty, tx = tiles
    if ty < 1 or tx < 1:
        raise ValueError(f"tiles must be >= 1, got {tiles}")
    if ty > h or tx > w:
        raise ValueError(f"tiles {ty}x{tx} do not fit a {h}x{w} slice")
    if not clip_limit > 0:
        raise ValueError(f"clip_limit must be > 0, got {clip_limit}")

    top = CLAHE_LEVELS - 1
    grey = np.rint(image * top).astype(np.uint8)
    # OpenCV reads a non-positive clip limit as "no clipping"
    clahe = cv2.createCLAHE(
        clipLimit=float(clip_limit) if np.isfinite(clip_limit) else 0.0,
        tileGridSize=(int(tx), int(ty)),
    )
    return clahe.apply(np.ascontiguousarray(grey)).astype(np.float64) / top


def clahe_volume(volume, clip_limit=2.0, tiles=(8, 8)):
    def _apply(x):
        return np.stack([clahe_slice(s, clip_limit, tiles) for s in x])

    return _map_data(volume, _apply)


# ============================
# Geometry
# ============================


def crop_offsets(h: int, w: int, out_h: int, out_w: int) -> tuple[int, int]:
    if out_h > h or out_w > w:
        raise ValueError(f"crop {out_h}x{out_w} is larger than the {h}x{w} slice")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"crop size must be positive, got {out_h}x{out_w}")
    return (h - out_h) // 2, (w - out_w) // 2


def center_crop(volume, out_h: int, out_w: int):
    """Centered in-plane crop of every slice; the slice count is unchanged."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    _, h, w = data.shape
    oy, ox = crop_offsets(h, w, out_h, out_w)
    window = (slice(None), slice(oy, oy + out_h), slice(ox, ox + out_w))
    if isinstance(volume, Volume):
        labels = None if volume.labels is None else volume.labels[window]
        return volume.with_arrays(volume.data[window], labels)
    return data[window].copy()


def fitted_crop(shape_hw: tuple[int, int], crop: tuple[int, int], divisor: int) -> tuple[int, int]:
    """Requested crop capped to the slice and rounded down to a multiple of divisor."""
    out = []
    for size, want in zip(shape_hw, crop):
        c = min(size, want) // divisor * divisor
        if c < divisor:
            raise ValueError(
                f"slice extent {size} is smaller than the network divisor {divisor}"
            )
        out.append(c)
    return out[0], out[1]


def paste_center(cropped: np.ndarray, full_hw: tuple[int, int], fill=0) -> np.ndarray:
    """Inverse of center_crop for label maps: place into a full-size array."""
    d, out_h, out_w = cropped.shape
    oy, ox = crop_offsets(full_hw[0], full_hw[1], out_h, out_w)
    full = np.full((d, *full_hw), fill, dtype=cropped.dtype)
    full[:, oy : oy + out_h, ox : ox + out_w] = cropped
    return full


def flip_volume(volume, axis: str):
    """Mirror along 'horizontal' (W) or 'vertical' (H); labels follow."""
    if axis not in FLIP_AXES:
        raise ValueError(f"flip axis must be one of {sorted(FLIP_AXES)}, got {axis!r}")
    ax = FLIP_AXES[axis]
    if isinstance(volume, Volume):
        labels = None if volume.labels is None else np.flip(volume.labels, axis=ax).copy()
        return volume.with_arrays(np.flip(volume.data, axis=ax).copy(), labels)
    return np.flip(np.asarray(volume), axis=ax).copy()


def offline_flips(case_id: str, volume: Volume) -> list[tuple[str, Volume]]:
    """Original plus horizontal and vertical mirror copies."""
    out = [(case_id, volume)]
    for axis, suffix in FLIP_SUFFIXES.items():
        out.append((f"{case_id}#{suffix}", flip_volume(volume, axis)))
    return out


def source_case(case_id: str) -> str:
    """Strip an offline-flip suffix: 'case_003#flip_h' -> 'case_003'."""
    return case_id.split("#", 1)[0]


# ============================
# Pipeline
# ============================


def preprocess_volume(volume: Volume, config: PreprocessConfig, *, divisor: int = 1) -> Volume:
    """window -> CLAHE per slice -> normalize -> center crop."""
    config.validate()
    out = window_and_scale(volume, config.window_lo, config.window_hi)
    if config.clahe:
        out = clahe_volume(out, config.clahe_clip, config.clahe_tiles)
    out = normalize_volume(out)
    crop_h, crop_w = fitted_crop(out.shape[1:], config.crop, divisor)
    if (crop_h, crop_w) != tuple(config.crop):
        logger.debug("crop %s fitted to %dx%d", tuple(config.crop), crop_h, crop_w)
    return center_crop(out, crop_h, crop_w)
