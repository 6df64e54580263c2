# scripts/pipeline.py
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import pandas as pd

from scripts.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from scripts.config import (
    BEST_CKPT,
    CURVES_FILE,
    CV_SUMMARY_COLUMNS,
    CV_SUMMARY_FILE,
    EPOCH_LOG_COLUMNS,
    EPOCH_LOG_FILE,
    POSTPROCESS_IMPACT_FILE,
    STATE_CKPT,
    fold_dir,
)
from scripts.metrics import evaluate_volume
from scripts.optimizer import five_fold_split
from scripts.plots import make_training_curves_figure, save_fig_overwrite
from scripts.preprocessing import preprocess_volume
from scripts.reports import report_frame
from scripts.trainer import (
    TrainConfig,
    TrainState,
    evaluate_dice,
    predict_volume,
    prepare_fold,
    state_checkpoint,
    train_stage1,
    train_stage2,
)
from scripts.volume_io import Volume, list_cases, load_dataset

logger = logging.getLogger(__name__)


@dataclass
class FoldResult:
    fold: int
    stage: int
    loss_kind: str
    epochs_run: int
    best_epoch: int
    best_val_dsc: float
    train_dsc: float
    final_lr: float
    n_train_cases: int
    n_val_cases: int
    checkpoint: str

    def to_row(self) -> dict:
        row = asdict(self)
        return {c: row[c] for c in CV_SUMMARY_COLUMNS}


def resolve_resume(resume: str | Path, fold: int) -> Path:
    """
    A checkpoint file is used as-is; a directory is read as a previous
    --out tree and resolves to its fold_<k>/stage1_best.ckpt.
    """
    resume = Path(resume)
    path = fold_dir(resume, fold) / BEST_CKPT.format(stage=1) if resume.is_dir() else resume
    if not path.is_file():
        raise FileNotFoundError(f"resume checkpoint not found: {path}")
    return path


def resume_fold(resume: str | Path | None) -> int | None:
    """Fold recorded in a resume checkpoint file; None for a directory or no resume."""
    if resume is None or Path(resume).is_dir():
        return None
    fold = load_checkpoint(resume).meta.get("fold")
    return None if fold is None else int(fold)


def resume_folds(resume: str | Path | None, folds: list[int] | None) -> list[int] | None:
    """
    A resume file belongs to one fold: default the fold list to it and refuse
    any other. Directories resume every fold from its own subdirectory.
    """
    if resume is None or Path(resume).is_dir():
        return folds
    recorded = resume_fold(resume)
    if recorded is None:
        if folds is None or len(folds) != 1:
            raise ValueError(
                f"{resume} records no fold; name exactly one fold to resume it"
            )
        return list(folds)
    if folds is None:
        return [recorded]
    if list(folds) != [recorded]:
        raise ValueError(f"{resume} belongs to fold {recorded}, not to folds {list(folds)}")
    return [recorded]


def _fold_cases(
    case_ids: list[str], config: TrainConfig, fold: int, resume: Checkpoint | None
) -> tuple[list[str], list[str]]:
    if resume is not None and "train_cases" in resume.meta:
        return list(resume.meta["train_cases"]), list(resume.meta["val_cases"])
    if not 0 <= fold < config.folds:
        raise ValueError(f"fold must be in [0, {config.folds}), got {fold}")
    return five_fold_split(case_ids, config.seed, config.folds)[fold]


def postprocess_impact(
    checkpoint: Checkpoint, volumes: dict[str, Volume], config: TrainConfig
) -> pd.DataFrame:
    """
    Per validation case and organ: DSC and HD with and without
    largest-component filtering, and the change the filter makes.
    """
    if not volumes:
        return pd.DataFrame()
    frames = []
    k = checkpoint.model_config.num_classes
    for cid, vol in volumes.items():
        prep = preprocess_volume(vol, config.preprocess, divisor=config.model.divisor)
        raw = predict_volume(checkpoint, prep, postprocess=False)
        filtered = predict_volume(checkpoint, prep, postprocess=True)
        before = report_frame(evaluate_volume(prep.labels, raw, prep.spacing, k), case_id=cid)
        after = report_frame(evaluate_volume(prep.labels, filtered, prep.spacing, k), case_id=cid)
        merged = before.merge(
            after[["case_id", "organ", "dsc", "hd"]],
            on=["case_id", "organ"],
            suffixes=("_raw", "_filtered"),
        )
        frames.append(merged)
    df = pd.concat(frames, ignore_index=True)
    df["dsc_delta"] = df["dsc_filtered"] - df["dsc_raw"]
    df["hd_delta"] = df["hd_filtered"] - df["hd_raw"]
    return df[
        ["case_id", "organ", "voxels", "dsc_raw", "dsc_filtered", "dsc_delta",
         "hd_raw", "hd_filtered", "hd_delta"]
    ]


def write_epoch_log(history: list[dict], path: Path) -> Path:
    pd.DataFrame(history, columns=EPOCH_LOG_COLUMNS).to_csv(path, index=False)
    return path


def _curves_history(fdir: Path, stage: int, history: list[dict]) -> pd.DataFrame:
    frames = []
    if stage == 2:
        stage1_log = fdir / EPOCH_LOG_FILE.format(stage=1)
        if stage1_log.exists():
            frames.append(pd.read_csv(stage1_log))
    frames.append(pd.DataFrame(history, columns=EPOCH_LOG_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def run_fold(
    data_dir: str | Path,
    out_dir: str | Path,
    fold: int,
    config: TrainConfig,
    *,
    stage: int = 1,
    resume: str | Path | None = None,
    volumes: dict[str, Volume] | None = None,
) -> FoldResult:
    """
    Train one fold for one stage and write its artifacts under out_dir/fold_<k>/:
    best and last checkpoints, epoch log, curves, and the post-processing impact table.
    """
    config.validate()
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and resume is None:
        raise ValueError("stage 2 needs a stage-1 checkpoint (--resume)")

    volumes = volumes if volumes is not None else load_dataset(data_dir)
    resume_ckpt = None
    if resume is not None:
        resume_ckpt = load_checkpoint(resolve_resume(resume, fold) if stage == 2 else resume)
        recorded = resume_ckpt.meta.get("fold")
        if recorded is not None and int(recorded) != fold:
            raise ValueError(f"resume checkpoint belongs to fold {recorded}, not fold {fold}")

    train_ids, val_ids = _fold_cases(sorted(volumes), config, fold, resume_ckpt)
    missing = sorted(set(train_ids + val_ids) - set(volumes))
    if missing:
        raise KeyError(f"cases named by the fold split are missing from the dataset: {missing}")
    data = prepare_fold(volumes, train_ids, val_ids, config)

    fdir = fold_dir(out_dir, fold)
    fdir.mkdir(parents=True, exist_ok=True)
    state_path = fdir / STATE_CKPT.format(stage=stage)

    def _save_state(state: TrainState) -> None:
        ckpt = state_checkpoint(state, data, config)
        ckpt.meta["fold"] = fold
        save_checkpoint(ckpt, state_path)

    logger.info("fold %d stage %d: %d train / %d val cases", fold, stage, len(train_ids), len(val_ids))
    if stage == 1:
        best = train_stage1(data, config, resume=resume_ckpt, on_epoch_end=_save_state)
    else:
        best = train_stage2(resume_ckpt, data, config, on_epoch_end=_save_state)
    best.meta["fold"] = fold

    best_path = save_checkpoint(best, fdir / BEST_CKPT.format(stage=stage))
    history = best.meta["history"]
    write_epoch_log(history, fdir / EPOCH_LOG_FILE.format(stage=stage))
    fig, _ = make_training_curves_figure(_curves_history(fdir, stage, history))
    save_fig_overwrite(fig, fdir / CURVES_FILE.format(stage=stage))

    impact = postprocess_impact(best, {cid: volumes[cid] for cid in val_ids}, config)
    impact.to_csv(fdir / POSTPROCESS_IMPACT_FILE.format(stage=stage), index=False)

    train_dsc = evaluate_dice(best.params(), config.model, data.train, config.val_batch_size)
    result = FoldResult(
        fold=fold,
        stage=stage,
        loss_kind=best.loss_kind,
        epochs_run=int(best.meta["epoch"]),
        best_epoch=int(best.meta["best_epoch"]),
        best_val_dsc=best.best_score,
        train_dsc=float(train_dsc),
        final_lr=float(best.meta["lr"]),
        n_train_cases=len(train_ids),
        n_val_cases=len(val_ids),
        checkpoint=str(best_path),
    )
    logger.info("fold %d stage %d done: best val_dsc=%.4f -> %s", fold, stage, result.best_val_dsc, best_path)
    return result


def _run_fold_job(args: tuple) -> FoldResult:
    data_dir, out_dir, fold, config, stage, resume = args
    return run_fold(data_dir, out_dir, fold, config, stage=stage, resume=resume)


def update_cv_summary(results: list[FoldResult], out_dir: str | Path) -> pd.DataFrame:
    """Merge fold results into cv_summary.csv, replacing rows for the same fold/stage/loss."""
    path = Path(out_dir) / CV_SUMMARY_FILE
    new = pd.DataFrame([r.to_row() for r in results], columns=CV_SUMMARY_COLUMNS)
    if path.exists():
        old = pd.read_csv(path)
        keys = ["fold", "stage", "loss_kind"]
        merged = old.merge(new[keys], on=keys, how="left", indicator=True)
        old = old.loc[(merged["_merge"] == "left_only").to_numpy()]
        new = pd.concat([old, new], ignore_index=True)
    new = new.sort_values(["stage", "loss_kind", "fold"]).reset_index(drop=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    new.to_csv(path, index=False)
    return new


def run_cross_validation(
    data_dir: str | Path,
    out_dir: str | Path,
    config: TrainConfig,
    *,
    stage: int = 1,
    folds: list[int] | None = None,
    resume: str | Path | None = None,
    jobs: int = 1,
) -> list[FoldResult]:
    """Run the requested folds (default: all), optionally in worker processes."""
    config.validate()
    n_cases = len(list_cases(data_dir))
    if n_cases < config.folds:
        raise ValueError(f"need at least {config.folds} cases for {config.folds}-fold CV, found {n_cases}")
    folds = resume_folds(resume, folds)
    folds = list(range(config.folds)) if folds is None else list(folds)

    if jobs > 1 and len(folds) > 1:
        args = [(data_dir, out_dir, f, config, stage, resume) for f in folds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, args))
    else:
        volumes = load_dataset(data_dir)
        results = [
            run_fold(data_dir, out_dir, f, config, stage=stage, resume=resume, volumes=volumes)
            for f in folds
        ]

    update_cv_summary(results, out_dir)
    return results


def print_cv_summary(results: list[FoldResult]) -> None:
    print("\n" + "=" * 60)
    print("U-Net+DR: Cross-validation Summary")
    print("=" * 60)
    for r in results:
        print(
            f"Fold {r.fold}  stage {r.stage}  loss={r.loss_kind:<8} "
            f"epochs={r.epochs_run:<4} best@{r.best_epoch:<4} "
            f"val_dsc={r.best_val_dsc:.4f}  train_dsc={r.train_dsc:.4f}"
        )
    if results:
        mean_val = sum(r.best_val_dsc for r in results) / len(results)
        print("-" * 60)
        print(f"Mean validation DSC over {len(results)} fold(s): {mean_val:.4f}")
    print("=" * 60 + "\n")
