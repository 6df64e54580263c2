# scripts/checkpoints.py
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from scripts.model import ModelConfig, ParameterSet
from scripts.optimizer import AdamState

MAGIC = b"UNDRCKPT"
VERSION = 1

_PREFIXES = (
    "param",
    "buffer",
    "adam_m",
    "adam_v",
    "best_param",
    "best_buffer",
    "best_adam_m",
    "best_adam_v",
)


class CheckpointError(ValueError):
    pass


class CheckpointBadMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """
    Serialized training state.

    `meta` holds everything that is not an array: stage, kind ("best" or
    "state"), loss and train configs, epoch history, case-id audit lists,
    best score and the generator state. `arrays` is keyed by namespace
    (`param`, `buffer`, `adam_m`, ...) and then by parameter name.
    """

    model_config: ModelConfig
    arrays: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return self.arrays.get(prefix, {})

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", 0))

    @property
    def kind(self) -> str:
        return str(self.meta.get("kind", "best"))

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def best_score(self) -> float:
        return float(self.meta.get("best_score", float("nan")))

    @property
    def loss_kind(self) -> str:
        return str(self.meta.get("loss", {}).get("kind", ""))

    def params(self) -> ParameterSet:
        return ParameterSet.from_arrays(self.group("param"), self.group("buffer"))

    def best_params(self) -> ParameterSet:
        return ParameterSet.from_arrays(self.group("best_param"), self.group("best_buffer"))

    def adam_state(self, prefix: str = "adam") -> AdamState:
        return AdamState(
            self.step if prefix == "adam" else int(self.meta.get("best_step", 0)),
            {k: v.copy() for k, v in self.group(f"{prefix}_m").items()},
            {k: v.copy() for k, v in self.group(f"{prefix}_v").items()},
        )


# ============================
# Binary container
# ============================


def _records(ckpt: Checkpoint):
    for prefix in _PREFIXES:
        for name, arr in sorted(ckpt.group(prefix).items()):
            yield f"{prefix}/{name}", np.asarray(arr, dtype=np.float64)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    unknown = set(ckpt.arrays) - set(_PREFIXES)
    if unknown:
        raise ValueError(f"unknown checkpoint namespaces: {sorted(unknown)}")
    meta = dict(ckpt.meta)
    meta["model_config"] = ckpt.model_config.to_dict()
    meta_raw = json.dumps(meta, sort_keys=True, allow_nan=True).encode("utf-8")

    records = list(_records(ckpt))
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_raw)), meta_raw]
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        raw_name = name.encode("utf-8")
        payload = arr.astype("<f8").tobytes()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.raw)})"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def checkpoint_from_bytes(raw: bytes, path: str | Path = "<bytes>") -> Checkpoint:
    r = _Reader(raw, Path(path))
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointBadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version} (expected {VERSION})")

    meta_raw = r.take(r.u32("metadata length"), "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata ({e})") from None
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: metadata has no model_config")
    model_config = ModelConfig.from_dict(meta.pop("model_config"))

    arrays: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("record name length"), "record name").decode("utf-8")
        ndim = r.u32(f"{name} rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        n_bytes = r.u64(f"{name} payload length")
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if n_bytes != expected:
            raise CheckpointError(
                f"{path}: record {name!r} declares {n_bytes} bytes for shape {shape}"
            )
        payload = r.take(n_bytes, f"{name} payload")
        prefix, _, key = name.partition("/")
        if prefix not in _PREFIXES or not key:
            raise CheckpointError(f"{path}: unknown record {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        arrays.setdefault(prefix, {})[key] = arr

    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after the last record")
    return Checkpoint(model_config, arrays, meta, version)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), path)
