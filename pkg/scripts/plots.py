# scripts/plots.py
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.colors import ListedColormap

from scripts.metrics import MetricsReport
from scripts.reports import report_table


def get_default_plot_style() -> dict:
    """
    Central place for styling knobs.
    """
    return {
        # line widths
        "raw_lw": 1.0,
        "trend_lw": 2.4,
        # colors
        "loss_color": "#af0066",
        "val_color": "#028F20",
        "lr_color": "#05728d",
        "stage_line_color": "#afadad",
        "dsc_bar_color": "#1f77b4",
        "hd_bar_color": "#ff7f0e",
        # label overlay: background transparent, then one color per organ
        "organ_colors": ["#00000000", "#e6c229", "#d11149", "#1a8fe3", "#f17105"],
        "overlay_alpha": 0.45,
    }


def make_training_curves_figure(history: pd.DataFrame, style: dict | None = None):
    """
    Loss, validation DSC, and learning rate (log axis) per epoch.
    A dashed line marks where stage 2 begins when both stages are present.

    Expects columns: epoch, stage, loss, val_dsc, lr.
    Returns (fig, axes).
    """
    style = style or get_default_plot_style()
    df = history.reset_index(drop=True).copy()
    df["step"] = np.arange(1, len(df) + 1)

    fig, axes = plt.subplots(3, 1, figsize=(10, 8), sharex=True)
    ax_loss, ax_val, ax_lr = axes

    ax_loss.plot(df["step"], df["loss"], color=style["loss_color"], linewidth=style["trend_lw"])
    ax_loss.set_ylabel("Training loss")

    ax_val.plot(df["step"], df["val_dsc"], color=style["val_color"], linewidth=style["trend_lw"])
    ax_val.set_ylabel("Validation DSC")
    ax_val.set_ylim(0, 1)

    ax_lr.plot(df["step"], df["lr"], color=style["lr_color"], linewidth=style["raw_lw"])
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("Learning rate")
    ax_lr.set_xlabel("Epoch (both stages)")

    if df["stage"].nunique() > 1:
        boundary = df.loc[df["stage"] == df["stage"].max(), "step"].min() - 0.5
        for ax in axes:
            ax.axvline(boundary, color=style["stage_line_color"], linestyle="--", linewidth=1)
        ax_loss.annotate(
            "stage 2",
            xy=(boundary, 1),
            xycoords=("data", "axes fraction"),
            xytext=(4, -12),
            textcoords="offset points",
        )

    for ax in axes:
        ax.grid(True, linestyle="--", linewidth=0.5, alpha=0.4)

    ax_loss.set_title("Training curves")
    fig.tight_layout()
    return fig, axes


def make_organ_bars_figure(report: MetricsReport, style: dict | None = None):
    """
    Per-organ DSC and HD side by side, in results-table column order.
    Returns (fig, axes).
    """
    style = style or get_default_plot_style()
    table = report_table(report).drop(columns="Mean")

    fig, (ax_dsc, ax_hd) = plt.subplots(1, 2, figsize=(12, 4.5))

    ax_dsc.bar(table.columns, table.loc["DSC"], color=style["dsc_bar_color"])
    ax_dsc.set_ylim(0, 1)
    ax_dsc.set_ylabel("DSC")
    ax_dsc.set_title(f"Dice (mean {report.mean_dsc:.3f})")

    hd = table.loc["HD"].astype(float)
    ax_hd.bar(table.columns, hd.fillna(0.0), color=style["hd_bar_color"])
    for i, v in enumerate(hd):
        if not np.isfinite(v):
            ax_hd.annotate("undef", xy=(i, 0), ha="center", va="bottom")
    ax_hd.set_ylabel("HD (mm)")
    ax_hd.set_title(f"Hausdorff (mean {report.mean_hd:.2f} mm)")

    for ax in (ax_dsc, ax_hd):
        ax.grid(True, axis="y", linestyle="--", linewidth=0.5, alpha=0.4)

    fig.tight_layout()
    return fig, (ax_dsc, ax_hd)


def _views(volume: np.ndarray, index: tuple[int, int, int]):
    z, y, x = index
    return [volume[z], volume[:, y, :], volume[:, :, x]]


def make_overlay_figure(
    image: np.ndarray,
    labels: np.ndarray | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    *,
    index: tuple[int, int, int] | None = None,
    title: str = "",
    style: dict | None = None,
):
    """
    Axial, coronal and sagittal views through `index` (default: volume centre),
    with labels drawn on top. Aspect ratios follow the voxel spacing.
    Returns (fig, axes).
    """
    style = style or get_default_plot_style()
    d, h, w = image.shape
    index = index or (d // 2, h // 2, w // 2)
    sx, sy, sz = spacing

    cmap = ListedColormap(style["organ_colors"])
    names = ["Axial", "Coronal", "Sagittal"]
    aspects = [sy / sx, sz / sx, sz / sy]

    fig, axes = plt.subplots(1, 3, figsize=(13, 4.5))
    img_views = _views(image, index)
    lab_views = _views(labels, index) if labels is not None else [None] * 3
    for ax, name, img, lab, aspect in zip(axes, names, img_views, lab_views, aspects):
        ax.imshow(img, cmap="gray", aspect=aspect, origin="upper")
        if lab is not None:
            masked = np.ma.masked_where(lab == 0, lab)
            ax.imshow(
                masked,
                cmap=cmap,
                vmin=0,
                vmax=len(style["organ_colors"]) - 1,
                alpha=style["overlay_alpha"],
                aspect=aspect,
                interpolation="nearest",
                origin="upper",
            )
        ax.set_title(name)
        ax.set_axis_off()

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return fig, axes


def save_fig_overwrite(fig, path: Path, dpi: int = 150) -> Path:
    """
    Save a matplotlib figure to disk, overwriting if it already exists,
    then close it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    return path
