# scripts/volume_io.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scripts.config import IMAGE_FILE, LABELS_FILE

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy kind (little-endian base)
DATATYPES: dict[int, np.dtype] = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
}
DATATYPE_CODES = {dt.str.lstrip("<|"): code for code, dt in DATATYPES.items()}

XYZT_MM_SEC = 2 | 8

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def header_dtype(byteorder: str = "<") -> np.dtype:
    return np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)


class NiftiError(ValueError):
    pass


class NiftiBadMagicError(NiftiError):
    pass


class NiftiUnsupportedDatatypeError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    pass


class NiftiHeaderError(NiftiError):
    pass


@dataclass
class Volume:
    """
    3-D scan in [D, H, W] order.

    spacing is (sx, sy, sz) in mm, i.e. (W, H, D) axis order, as stored
    in the NIfTI pixdim fields.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3-D [D, H, W], got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"Volume spacing must be three positive values, got {self.spacing}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != self.data.shape:
                raise ValueError(
                    f"labels shape {labels.shape} does not match data {self.data.shape}"
                )
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            self.labels = labels.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def check_labels(self, num_classes: int) -> None:
        if self.labels is not None and self.labels.size and self.labels.max() >= num_classes:
            raise ValueError(
                f"labels must lie in [0, {num_classes}), found {int(self.labels.max())}"
            )

    def with_arrays(self, data: np.ndarray, labels: np.ndarray | None) -> "Volume":
        return Volume(data, self.spacing, labels)


# ============================
# NIfTI-1 single-file (.nii)
# ============================


def _parse_header(raw: bytes, path: Path) -> tuple[np.void, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncatedError(
            f"{path}: header truncated ({len(raw)} of {HEADER_SIZE} bytes)"
        )
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(order), count=1)[0]
        if int(hdr["sizeof_hdr"]) == HEADER_SIZE:
            break
    else:
        raise NiftiHeaderError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    if bytes(hdr["magic"]).ljust(4, b"\x00") != MAGIC:
        raise NiftiBadMagicError(
            f"{path}: bad magic {bytes(hdr['magic'])!r}, expected {MAGIC!r}"
        )
    return hdr, order


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """
    Read an uncompressed NIfTI-1 file.

    Returns (array [D, H, W] float64 with scl_slope/scl_inter applied, (sx, sy, sz)).
    """
    path = Path(path)
    raw = path.read_bytes()
    hdr, order = _parse_header(raw, path)

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiUnsupportedDatatypeError(
            f"{path}: datatype code {code} not supported (use one of {sorted(DATATYPES)})"
        )
    dtype = DATATYPES[code].newbyteorder(order)

    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise NiftiHeaderError(f"{path}: expected a 3-D volume, got dim={dim}")
    w, h, d = dim[1:4]
    if min(w, h, d) < 1:
        raise NiftiHeaderError(f"{path}: non-positive extent in dim={dim}")

    pixdim = [float(p) for p in hdr["pixdim"][1:4]]
    if any(not np.isfinite(p) or p == 0 for p in pixdim):
        raise NiftiHeaderError(f"{path}: invalid voxel spacing {pixdim}")
    spacing = tuple(abs(p) for p in pixdim)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiHeaderError(f"{path}: vox_offset {offset} inside the header")
    n_bytes = w * h * d * dtype.itemsize
    if len(raw) < offset + n_bytes:
        raise NiftiTruncatedError(
            f"{path}: payload truncated ({max(len(raw) - offset, 0)} of {n_bytes} bytes)"
        )
    data = np.frombuffer(raw, dtype=dtype, count=w * h * d, offset=offset)
    data = data.reshape(d, h, w).astype(np.float64)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    return data, spacing


def write_nifti(
    array: np.ndarray,
    spacing: tuple[float, float, float],
    path: str | Path,
    *,
    dtype: str = "f4",
    descrip: str = "",
) -> Path:
    """Write a [D, H, W] array as little-endian NIfTI-1 (.nii)."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"write_nifti expects [D, H, W], got {array.shape}")
    if dtype not in DATATYPE_CODES:
        raise ValueError(f"dtype {dtype!r} not writable (one of {sorted(DATATYPE_CODES)})")
    code = DATATYPE_CODES[dtype]
    out_dtype = DATATYPES[code]
    d, h, w = array.shape
    sx, sy, sz = (float(s) for s in spacing)

    hdr = np.zeros((), dtype=header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, w, h, d, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = out_dtype.itemsize * 8
    hdr["pixdim"] = [1.0, sx, sy, sz, 0, 0, 0, 0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = XYZT_MM_SEC
    hdr["sform_code"] = 1
    hdr["srow_x"] = [sx, 0, 0, 0]
    hdr["srow_y"] = [0, sy, 0, 0]
    hdr["srow_z"] = [0, 0, sz, 0]
    hdr["descrip"] = descrip.encode("ascii", "replace")[:80]
    hdr["magic"] = MAGIC

    payload = np.ascontiguousarray(array.astype(out_dtype))
    with path.open("wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        f.write(payload.tobytes())
    return path


def read_volume(path: str | Path, labels_path: str | Path | None = None) -> Volume:
    data, spacing = read_nifti(path)
    labels = None
    if labels_path is not None:
        lab, _ = read_nifti(labels_path)
        labels = np.rint(lab).astype(np.int64)
    return Volume(data, spacing, labels)


def write_volume(
    volume: Volume, path: str | Path, *, labels_path: str | Path | None = None
) -> Path:
    """Image as float32; labels (when present and a path is given) as uint8."""
    write_nifti(volume.data, volume.spacing, path, dtype="f4", descrip="image")
    if labels_path is not None:
        if volume.labels is None:
            raise ValueError("labels_path given but the volume has no labels")
        write_nifti(volume.labels, volume.spacing, labels_path, dtype="u1", descrip="labels")
    return Path(path)


def write_labels(labels: np.ndarray, spacing, path: str | Path) -> Path:
    return write_nifti(np.asarray(labels), spacing, path, dtype="u1", descrip="labels")


# ============================
# Dataset layout: <case_id>/image.nii + <case_id>/labels.nii
# ============================


def read_case(case_dir: str | Path) -> Volume:
    case_dir = Path(case_dir)
    labels = case_dir / LABELS_FILE
    return read_volume(case_dir / IMAGE_FILE, labels if labels.exists() else None)


def write_case(volume: Volume, case_dir: str | Path) -> Path:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_volume(
        volume,
        case_dir / IMAGE_FILE,
        labels_path=case_dir / LABELS_FILE if volume.labels is not None else None,
    )
    return case_dir


def list_cases(data_dir: str | Path) -> list[str]:
    """Sorted case ids: subdirectories that contain an image file."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    return sorted(p.name for p in data_dir.iterdir() if (p / IMAGE_FILE).is_file())


def load_dataset(data_dir: str | Path, case_ids: list[str] | None = None) -> dict[str, Volume]:
    data_dir = Path(data_dir)
    ids = case_ids if case_ids is not None else list_cases(data_dir)
    volumes = {cid: read_case(data_dir / cid) for cid in ids}
    logger.info("Loaded %d cases from %s", len(volumes), data_dir)
    return volumes
