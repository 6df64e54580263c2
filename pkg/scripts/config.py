# scripts/config.py
from __future__ import annotations

import dataclasses
from pathlib import Path

# ---- label convention ----
CLASS_NAMES = [
    "background",
    "esophagus",
    "heart",
    "trachea",
    "aorta",
]

# Column order of the per-organ results table
ORGAN_TABLE_ORDER = [
    "Esophagus",
    "Heart",
    "Trachea",
    "Aorta",
]

EPOCH_LOG_COLUMNS = [
    "epoch",
    "stage",
    "loss",
    "val_dsc",
    "lr",
]

CV_SUMMARY_COLUMNS = [
    "fold",
    "stage",
    "loss_kind",
    "epochs_run",
    "best_epoch",
    "best_val_dsc",
    "train_dsc",
    "final_lr",
    "n_train_cases",
    "n_val_cases",
]

# ---- dataset + output layout ----
IMAGE_FILE = "image.nii"
LABELS_FILE = "labels.nii"
CASES_MANIFEST = "cases.csv"

BEST_CKPT = "stage{stage}_best.ckpt"
STATE_CKPT = "stage{stage}_last.ckpt"
EPOCH_LOG_FILE = "stage{stage}_epoch_log.csv"
CURVES_FILE = "stage{stage}_curves.png"
CV_SUMMARY_FILE = "cv_summary.csv"
POSTPROCESS_IMPACT_FILE = "stage{stage}_postprocess_impact.csv"


def class_names(num_classes: int) -> list[str]:
    """Organ names when the 5-class convention applies, generic names otherwise."""
    if num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [f"class_{k}" for k in range(num_classes)]


def fold_dir(out_dir: str | Path, fold: int) -> Path:
    return Path(out_dir) / f"fold_{fold}"


# ============================
# key=value config files
# ============================


def read_config_file(path: str | Path) -> dict[str, str]:
    """
    Parse `key=value` lines. Blank lines and `#` comments are ignored.
    Keys are dotted (`train.lr`, `model.base_channels`, `loss.kind`, ...).
    """
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, annotation, key: str):
    # annotations are strings under `from __future__ import annotations`
    text = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    text = text.replace(" ", "")
    try:
        if text.startswith("bool"):
            lowered = value.strip().lower()
            if lowered in {"true", "1", "yes", "y"}:
                return True
            if lowered in {"false", "0", "no", "n"}:
                return False
            raise ValueError(value)
        if text.startswith("int"):
            return int(value)
        if text.startswith("float"):
            return float(value)
        if text.startswith(("list[int]", "tuple[int")):
            return _seq_type(text)([int(v) for v in value.replace("x", ",").split(",") if v])
        if text.startswith("tuple[float"):
            return tuple(float(v) for v in value.split(",") if v)
        if text.startswith("str"):
            return value
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {value!r} as {text}") from None
    raise ValueError(f"config key {key!r}: unsupported field type {text}")


def _seq_type(text: str):
    return list if text.startswith("list") else tuple


def apply_overrides(cfg, values: dict[str, object], *, prefix: str = ""):
    """
    Return a copy of dataclass `cfg` with dotted-key overrides applied.

    Nested dataclass fields are addressed as `<field>.<subfield>`. String
    values are coerced with the field annotation; other values are used as-is.
    Unknown keys are rejected.
    """
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    changes: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {}

    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise ValueError(f"unknown config key {prefix + key!r}")
        current = getattr(cfg, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ValueError(f"config key {prefix + key!r}: {head} has no sub-keys")
            nested.setdefault(head, {})[rest] = value
        elif isinstance(value, str) and not dataclasses.is_dataclass(current):
            changes[head] = _coerce(value, fields[head].type, prefix + key)
        else:
            changes[head] = value

    for head, sub in nested.items():
        changes[head] = apply_overrides(getattr(cfg, head), sub, prefix=f"{prefix}{head}.")

    return dataclasses.replace(cfg, **changes)
