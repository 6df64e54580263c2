import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from scripts.metrics import MetricsReport, OrganScore
from scripts.plots import (
    make_organ_bars_figure,
    make_overlay_figure,
    make_training_curves_figure,
    save_fig_overwrite,
)


def _history():
    return pd.DataFrame(
        {
            "epoch": [1, 2, 3, 1, 2],
            "stage": [1, 1, 1, 2, 2],
            "loss": [0.9, 0.7, 0.6, 0.5, 0.45],
            "val_dsc": [0.2, 0.4, 0.5, 0.55, 0.6],
            "lr": [1e-4, 1e-4, 2e-5, 1e-4, 1e-4],
        }
    )


def test_training_curves_mark_stage_boundary(tmp_path):
    fig, axes = make_training_curves_figure(_history())
    assert len(axes) == 3
    assert axes[2].get_yscale() == "log"
    dashed = [ln for ln in axes[0].get_lines() if ln.get_linestyle() == "--"]
    assert dashed and dashed[0].get_xdata()[0] == 3.5
    path = save_fig_overwrite(fig, tmp_path / "plots" / "curves.png")
    assert path.stat().st_size > 0
    assert not plt.fignum_exists(fig.number)


def test_organ_bars_handle_undefined_hd():
    report = MetricsReport.from_scores(
        {
            "esophagus": OrganScore(0.7, 4.0),
            "heart": OrganScore(0.9, 8.0),
            "trachea": OrganScore(0.0, float("nan")),
            "aorta": OrganScore(0.8, 3.0),
        },
        {},
    )
    fig, (ax_dsc, ax_hd) = make_organ_bars_figure(report)
    assert [t.get_text() for t in ax_dsc.get_xticklabels()] == ["Esophagus", "Heart", "Trachea", "Aorta"]
    assert any(t.get_text() == "undef" for t in ax_hd.texts)
    plt.close(fig)


def test_overlay_has_three_views(small_phantom):
    fig, axes = make_overlay_figure(small_phantom.data, small_phantom.labels, small_phantom.spacing, title="case")
    assert [ax.get_title() for ax in axes] == ["Axial", "Coronal", "Sagittal"]
    assert len(axes[0].get_images()) == 2
    plt.close(fig)
    fig, axes = make_overlay_figure(np.zeros((4, 6, 6)), index=(1, 2, 3))
    assert len(axes[0].get_images()) == 1
    plt.close(fig)
