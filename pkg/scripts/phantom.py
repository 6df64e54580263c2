# scripts/phantom.py
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from scripts.config import CASES_MANIFEST, CLASS_NAMES
from scripts.volume_io import Volume, write_case

logger = logging.getLogger(__name__)

MIN_EXTENT = 16

ESOPHAGUS, HEART, TRACHEA, AORTA = 1, 2, 3, 4


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 96, 96)  # D, H, W
    spacing: tuple[float, float, float] = (0.98, 0.98, 2.5)  # sx, sy, sz (mm)
    noise_std: float = 10.0
    seed: int = 0
    hu_air: float = -1000.0
    hu_tissue: float = 40.0
    hu_esophagus: float = 0.0
    hu_heart: float = 100.0
    hu_trachea: float = -950.0
    hu_aorta: float = 150.0

    def validate(self) -> "PhantomSpec":
        problems = []
        if len(self.dims) != 3 or min(self.dims) < MIN_EXTENT:
            problems.append(f"dims={tuple(self.dims)} (every axis must be >= {MIN_EXTENT})")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            problems.append(f"spacing={tuple(self.spacing)} (three values > 0)")
        if self.noise_std < 0:
            problems.append(f"noise_std={self.noise_std} (must be >= 0)")
        if self.seed < 0:
            problems.append(f"seed={self.seed} (must be >= 0)")
        if problems:
            raise ValueError("Invalid PhantomSpec: " + "; ".join(problems))
        return self


def _grid(dims):
    d, h, w = dims
    return np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")


def _tube(dims, centerline: np.ndarray, radius: float) -> np.ndarray:
    """Voxels within `radius` (index units) of a polyline given as [M, 3] (z, y, x) points."""
    pts = np.rint(centerline).astype(int)
    inside = np.all((pts >= 0) & (pts < np.array(dims)), axis=1)
    seed = np.zeros(dims, dtype=bool)
    seed[tuple(pts[inside].T)] = True
    return ndimage.distance_transform_edt(~seed) <= radius


def _polyline(*points, step: float = 0.25) -> np.ndarray:
    """Densely sampled straight segments through the given (z, y, x) points."""
    out = []
    for a, b in zip(points[:-1], points[1:]):
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        t = np.linspace(0.0, 1.0, n + 1)[:, None]
        out.append(a + t * (b - a))
    return np.concatenate(out)


def phantom_masks(spec: PhantomSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Body and organ masks for one randomized phantom."""
    d, h, w = spec.dims
    m = min(h, w)
    zz, yy, xx = _grid(spec.dims)

    def jit(scale=0.02):
        return float(rng.uniform(-scale, scale))

    def size(scale=0.10):
        return float(1.0 + rng.uniform(-scale, scale))

    body = ((yy - (0.5 + jit()) * h) / (0.42 * h)) ** 2 + (
        (xx - (0.5 + jit()) * w) / (0.42 * w)
    ) ** 2 <= 1.0

    # trachea: straight air tube through the upper half
    rt = max(2.0, 0.045 * m * size())
    ty, tx = (0.30 + jit()) * h, (0.50 + jit()) * w
    trachea = _tube(spec.dims, _polyline((0.45 * d, ty, tx), (d - 1, ty, tx)), rt)

    # esophagus: thin wavy tube just behind the trachea
    re = max(1.5, 0.025 * m * size())
    ey = ty + rt + re + 2.0
    phase = rng.uniform(0, 2 * np.pi)
    z = np.linspace(0, d - 1, 8 * d)
    ex = 0.5 * w + 0.04 * w * np.sin(3.0 * np.pi * z / d + phase)
    esophagus = _tube(spec.dims, np.stack([z, np.full_like(z, ey), ex], axis=1), re)

    # heart: ellipsoid low in the volume
    cz, cy, cx = (0.35 + jit()) * d, (0.70 + jit()) * h, (0.40 + jit()) * w
    az, ay, ax = 0.30 * d * size(), 0.15 * h * size(), 0.16 * w * size()
    heart = ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0

    # aorta: ascending limb, arch in the y-z plane, descending limb
    ra = max(1.5, 0.04 * m * size(0.05))
    ax_ = (0.70 + jit()) * w
    y_up, y_down = (0.55 + jit()) * h, (0.35 + jit()) * h
    z1, rise = 0.65 * d, 0.15 * d
    theta = np.linspace(np.pi, 0.0, 64)
    y_mid, y_half = (y_up + y_down) / 2.0, (y_up - y_down) / 2.0
    arch = np.stack(
        [z1 + rise * np.sin(theta), y_mid - y_half * np.cos(theta), np.full_like(theta, ax_)],
        axis=1,
    )
    aorta_line = np.concatenate(
        [_polyline((0.0, y_up, ax_), (z1, y_up, ax_)), _polyline(*arch), _polyline((z1, y_down, ax_), (0.0, y_down, ax_))]
    )
    aorta = _tube(spec.dims, aorta_line, ra)

    organs = {"esophagus": esophagus, "heart": heart, "trachea": trachea, "aorta": aorta}
    organs = {k: v & body for k, v in organs.items()}
    return {"body": body, **organs}


def generate_phantom(spec: PhantomSpec | None = None) -> Volume:
    """
    One synthetic thoracic volume with exact labels.

    Image values are HU-like and carry additive Gaussian noise; labels do not.
    Voxel values are stored at float32 precision so NIfTI round trips are exact.
    """
    spec = (spec or PhantomSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    masks = phantom_masks(spec, rng)

    names = list(CLASS_NAMES[1:])
    for i, a in enumerate(names):
        if not masks[a].any():
            raise ValueError(f"dims {tuple(spec.dims)} too small: {a} is empty")
        for b in names[i + 1 :]:
            if np.any(masks[a] & masks[b]):
                raise ValueError(f"dims {tuple(spec.dims)} too small: {a} overlaps {b}")

    image = np.where(masks["body"], spec.hu_tissue, spec.hu_air)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    values = {
        "esophagus": (ESOPHAGUS, spec.hu_esophagus),
        "heart": (HEART, spec.hu_heart),
        "trachea": (TRACHEA, spec.hu_trachea),
        "aorta": (AORTA, spec.hu_aorta),
    }
    for organ, (label, hu) in values.items():
        image[masks[organ]] = hu
        labels[masks[organ]] = label

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = image.astype(np.float32).astype(np.float64)
    return Volume(image, spec.spacing, labels)


def case_id(index: int) -> str:
    return f"case_{index:03d}"


def generate_dataset(
    n_cases: int,
    out_dir: str | Path,
    spec: PhantomSpec | None = None,
    *,
    seed: int | None = None,
) -> pd.DataFrame:
    """
    Write `n_cases` phantoms as <out_dir>/case_NNN/{image,labels}.nii with
    per-case seed = seed + index, plus a cases.csv manifest. Returns the manifest.
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    spec = (spec or PhantomSpec()).validate()
    base_seed = spec.seed if seed is None else int(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for i in range(n_cases):
        case_spec = dataclasses.replace(spec, seed=base_seed + i)
        vol = generate_phantom(case_spec)
        cid = case_id(i)
        write_case(vol, out_dir / cid)
        counts = np.bincount(vol.labels.ravel(), minlength=len(CLASS_NAMES))
        rows.append(
            {
                "case_id": cid,
                "seed": case_spec.seed,
                "dims": "x".join(str(s) for s in case_spec.dims),
                "spacing": ",".join(f"{s:g}" for s in case_spec.spacing),
                **{f"voxels_{name}": int(c) for name, c in zip(CLASS_NAMES, counts)},
            }
        )
        logger.info("Wrote %s (seed=%d)", out_dir / cid, case_spec.seed)

    manifest = pd.DataFrame(rows)
    manifest.to_csv(out_dir / CASES_MANIFEST, index=False)
    return manifest
