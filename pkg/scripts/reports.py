# scripts/reports.py
from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from scripts.config import ORGAN_TABLE_ORDER
from scripts.metrics import MetricsReport, OrganScore


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def report_to_text(report: MetricsReport) -> str:
    """
    Serialize as sorted-by-section `key=value` lines:

        class.<organ>.dsc=...
        class.<organ>.hd=...      (nan when undefined)
        count.<organ>=...
        mean.dsc=...
        mean.hd=...
    """
    lines = []
    for organ, score in report.per_class.items():
        lines.append(f"class.{organ}.dsc={_fmt(score.dsc)}")
        lines.append(f"class.{organ}.hd={_fmt(score.hd)}")
    for organ, n in report.counts.items():
        lines.append(f"count.{organ}={int(n)}")
    lines.append(f"mean.dsc={_fmt(report.mean_dsc)}")
    lines.append(f"mean.hd={_fmt(report.mean_hd)}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> MetricsReport:
    scores: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    means: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"report line {lineno}: expected key=value, got {raw!r}")
        parts = key.split(".")
        if parts[0] == "class" and len(parts) == 3 and parts[2] in {"dsc", "hd"}:
            scores.setdefault(parts[1], {})[parts[2]] = float(value)
        elif parts[0] == "count" and len(parts) == 2:
            counts[parts[1]] = int(value)
        elif parts[0] == "mean" and len(parts) == 2 and parts[1] in {"dsc", "hd"}:
            means[parts[1]] = float(value)
        else:
            raise ValueError(f"report line {lineno}: unknown key {key!r}")

    per_class = {}
    for organ, d in scores.items():
        missing = {"dsc", "hd"} - set(d)
        if missing:
            raise KeyError(f"report is missing {sorted(missing)} for {organ!r}")
        per_class[organ] = OrganScore(d["dsc"], d["hd"])
    if set(means) != {"dsc", "hd"}:
        raise KeyError(f"report is missing mean entries, found {sorted(means)}")
    return MetricsReport(per_class, means["dsc"], means["hd"], counts)


def write_report(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(report_to_text(report), encoding="utf-8")
    return path


def read_report(path: str | Path) -> MetricsReport:
    return report_from_text(Path(path).read_text(encoding="utf-8"))


def _organ_columns(report: MetricsReport) -> list[tuple[str, str]]:
    titled = {organ.title(): organ for organ in report.per_class}
    ordered = [c for c in ORGAN_TABLE_ORDER if c in titled]
    ordered += [c for c in titled if c not in ordered]
    return [(c, titled[c]) for c in ordered]


def report_table(report: MetricsReport) -> pd.DataFrame:
    """Rows DSC/HD, columns Esophagus, Heart, Trachea, Aorta, Mean."""
    cols = _organ_columns(report)
    data = {
        title: [report.per_class[organ].dsc, report.per_class[organ].hd]
        for title, organ in cols
    }
    data["Mean"] = [report.mean_dsc, report.mean_hd]
    return pd.DataFrame(data, index=["DSC", "HD"])


def format_report_table(report: MetricsReport, digits: int = 4) -> str:
    table = report_table(report)
    return table.to_string(float_format=lambda v: f"{v:.{digits}f}", na_rep="undef")


def report_frame(report: MetricsReport, **labels) -> pd.DataFrame:
    """Long format: one row per organ with dsc, hd, voxels and any extra label columns."""
    rows = []
    for organ, score in report.per_class.items():
        rows.append(
            {
                **labels,
                "organ": organ,
                "dsc": score.dsc,
                "hd": score.hd,
                "voxels": report.counts.get(organ, 0),
            }
        )
    return pd.DataFrame(rows)


def print_evaluation_summary(report: MetricsReport, *, title: str = "Evaluation") -> None:
    print("\n" + "=" * 60)
    print(f"U-Net+DR: {title}")
    print("=" * 60)
    print(format_report_table(report))
    print("-" * 60)
    undefined = [o for o, s in report.per_class.items() if not s.hd_defined]
    if undefined:
        print(f"HD undefined (empty mask): {', '.join(undefined)}")
    else:
        print("HD defined for all organs")
    print("=" * 60 + "\n")
