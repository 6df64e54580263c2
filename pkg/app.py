from __future__ import annotations

import os
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import streamlit as st

from scripts.config import (
    CASES_MANIFEST,
    CV_SUMMARY_FILE,
    EPOCH_LOG_FILE,
    LABELS_FILE,
    POSTPROCESS_IMPACT_FILE,
)
from scripts.metrics import evaluate_volume
from scripts.model import ModelConfig, build_model
from scripts.phantom import PhantomSpec, generate_dataset
from scripts.plots import (
    make_organ_bars_figure,
    make_overlay_figure,
    make_training_curves_figure,
)
from scripts.reports import report_table
from scripts.volume_io import list_cases, read_case, read_nifti

# ============================
# Page config
# ============================
st.set_page_config(page_title="U-Net+DR", layout="wide")

with st.sidebar:
    if st.button("Quit App"):
        os._exit(0)

st.title("U-Net+DR: Thoracic Organ Segmentation")
st.caption("Runs locally on your computer. Volumes and checkpoints stay on this machine.")


# ============================
# Helpers
# ============================
def render_and_close(fig):
    st.pyplot(fig, clear_figure=True)
    plt.close(fig)


def _read_csv_if_exists(path: Path) -> pd.DataFrame | None:
    return pd.read_csv(path) if path.exists() else None


def _fold_dirs(out_path: Path) -> list[Path]:
    if not out_path.is_dir():
        return []
    return sorted(p for p in out_path.iterdir() if p.is_dir() and p.name.startswith("fold_"))


@st.cache_data(show_spinner=False)
def _load_case(case_dir: str):
    vol = read_case(case_dir)
    return vol.data, vol.labels, vol.spacing


# ============================
# Sidebar: folders
# ============================
with st.sidebar:
    st.header("Folders")
    data_dir = st.text_input(
        "Dataset folder",
        value=str(Path.home() / "unetdr" / "data"),
        help="<case>/image.nii + <case>/labels.nii",
    )
    out_dir = st.text_input(
        "Training output folder",
        value=str(Path.home() / "unetdr" / "runs"),
        help="The --out folder given to `run_pipeline.py train`.",
    )
    data_path, out_path = Path(data_dir), Path(out_dir)


tab_data, tab_cases, tab_train, tab_eval, tab_arch = st.tabs(
    ["Phantom Data", "Browse Cases", "Training", "Evaluate", "Architecture"]
)

# -------------------------
# TAB 1: Phantom data
# -------------------------
with tab_data:
    st.subheader("Generate a synthetic dataset")
    a, b, c = st.columns(3)
    n_cases = a.number_input("Cases", min_value=1, max_value=200, value=10, step=1)
    seed = b.number_input("Seed", min_value=0, value=7, step=1)
    dims_text = c.text_input("Dims (DxHxW)", value="32x96x96")

    if st.button("Generate", type="primary"):
        try:
            dims = tuple(int(v) for v in dims_text.lower().split("x"))
            spec = PhantomSpec(dims=dims, seed=int(seed))
            with st.spinner(f"Writing {n_cases} cases to {data_path}"):
                manifest = generate_dataset(int(n_cases), data_path, spec, seed=int(seed))
            st.success(f"Wrote {len(manifest)} cases.")
        except (ValueError, OSError) as e:
            st.error(str(e))

    manifest = _read_csv_if_exists(data_path / CASES_MANIFEST)
    if manifest is not None:
        st.dataframe(manifest, hide_index=True, width="stretch")
    else:
        st.info("No cases.csv in the dataset folder yet.")

# -------------------------
# TAB 2: Browse cases
# -------------------------
with tab_cases:
    st.subheader("Three-view overlay")
    try:
        cases = list_cases(data_path)
    except FileNotFoundError:
        cases = []
    if not cases:
        st.info("No cases found in the dataset folder.")
    else:
        case = st.selectbox("Case", cases)
        image, labels, spacing = _load_case(str(data_path / case))
        d, h, w = image.shape
        z = st.slider("Axial slice", 0, d - 1, d // 2)
        col_y, col_x = st.columns(2)
        y = col_y.slider("Coronal row", 0, h - 1, h // 2)
        x = col_x.slider("Sagittal column", 0, w - 1, w // 2)
        show_labels = st.toggle("Show labels", value=True)
        fig, _ = make_overlay_figure(
            image,
            labels if show_labels else None,
            spacing,
            index=(z, y, x),
            title=case,
        )
        render_and_close(fig)
        if labels is not None:
            counts = np.bincount(labels.ravel(), minlength=5)
            st.caption(f"Voxels per class: {counts.tolist()}")

# -------------------------
# TAB 3: Training
# -------------------------
with tab_train:
    st.subheader("Cross-validation")
    cv = _read_csv_if_exists(out_path / CV_SUMMARY_FILE)
    if cv is not None:
        st.dataframe(cv, hide_index=True, width="stretch")
        means = cv.groupby(["stage", "loss_kind"])[["best_val_dsc", "train_dsc"]].mean()
        st.markdown("**Mean over folds**")
        st.dataframe(means, width="stretch")
    else:
        st.info("No cv_summary.csv in the output folder yet.")

    folds = _fold_dirs(out_path)
    if folds:
        fold = st.selectbox("Fold", folds, format_func=lambda p: p.name)
        logs = [
            _read_csv_if_exists(fold / EPOCH_LOG_FILE.format(stage=s)) for s in (1, 2)
        ]
        logs = [df for df in logs if df is not None]
        if logs:
            history = pd.concat(logs, ignore_index=True)
            fig, _ = make_training_curves_figure(history)
            render_and_close(fig)
            with st.expander("Epoch log", expanded=False):
                st.dataframe(history, hide_index=True, width="stretch")

        for s in (1, 2):
            impact = _read_csv_if_exists(fold / POSTPROCESS_IMPACT_FILE.format(stage=s))
            if impact is not None and not impact.empty:
                st.markdown(f"**Largest-component filtering, stage {s}**")
                summary = impact.groupby("organ")[["dsc_delta", "hd_delta"]].mean()
                st.dataframe(summary, width="stretch")

# -------------------------
# TAB 4: Evaluate
# -------------------------
with tab_eval:
    st.subheader("Evaluate a prediction")
    gt_text = st.text_input("Ground-truth labels (.nii or case folder)")
    pred_text = st.text_input("Predicted labels (.nii)")
    full_mask = st.toggle("HD over full masks (slower)", value=False)

    if st.button("Evaluate", type="primary") and gt_text and pred_text:
        gt_path = Path(gt_text)
        gt_path = gt_path / LABELS_FILE if gt_path.is_dir() else gt_path
        try:
            gt, spacing = read_nifti(gt_path)
            pred, _ = read_nifti(pred_text)
            report = evaluate_volume(
                np.rint(gt).astype(np.int64),
                np.rint(pred).astype(np.int64),
                spacing,
                5,
                surface=not full_mask,
            )
        except (ValueError, OSError) as e:
            st.error(str(e))
        else:
            st.dataframe(report_table(report), width="stretch")
            fig, _ = make_organ_bars_figure(report)
            render_and_close(fig)

# -------------------------
# TAB 5: Architecture
# -------------------------
with tab_arch:
    st.subheader("Network summary")
    a, b, c = st.columns(3)
    depth = a.number_input("Depth", min_value=1, max_value=6, value=4)
    base = b.number_input("Base channels", min_value=1, max_value=64, value=8)
    residual = c.selectbox("Residual mode", ["add", "concat"])
    cfg = ModelConfig(depth=int(depth), base_channels=int(base), residual_mode=residual)
    params, arch = build_model(cfg, input_hw=(288, 288))
    st.metric("Parameters", f"{params.count():,}")
    st.code(arch.summary(), language=None)
